# Empty init file for tests package
