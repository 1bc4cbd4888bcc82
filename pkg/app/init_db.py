"""
Registry initialization script.

Creates the run-registry tables in an output directory (default: the current
directory) and can be run independently of any solve:

    python app/init_db.py runs/eg1
"""

import sys

from database import Base, create_tables, make_engine, registry_url


def init_database(directory: str = ".") -> str:
    """Create the registry tables and return the database URL."""
    url = registry_url(directory)
    print(f"Creating registry tables at {url} ...")
    create_tables(make_engine(url))
    print("Registry tables created successfully!")

    print("Created tables:")
    for table_name in Base.metadata.tables.keys():
        print(f"  - {table_name}")
    return url


if __name__ == "__main__":
    init_database(sys.argv[1] if len(sys.argv) > 1 else ".")
