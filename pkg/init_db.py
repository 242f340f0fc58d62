#!/usr/bin/env python3
"""
Results Database and Machine Configuration Initialization Script
"""

import os
import sys
import configparser
import argparse
from getpass import getpass
from sqlalchemy import create_engine
from sqlalchemy.exc import OperationalError
from dotenv import load_dotenv

load_dotenv('.flaskenv')
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from app import app, config_path
from extensions import db
from models import SimulationRun, RunMetric  # noqa: F401 (registers the tables)
from pimsim.config import load_config, write_config


def get_db_credentials(args=None):
    """Prompts for PostgreSQL connection details or uses command-line args."""
    if args and args.headless:
        return {
            'host': args.db_host or 'localhost',
            'port': args.db_port or '5432',
            'dbname': args.db_name or 'pimsim_db',
            'user': args.db_user or 'pimsim_user',
            'password': args.db_password or ''
        }

    print("\n--- PostgreSQL Database Configuration ---")

    host = input("Host [localhost]: ") or "localhost"
    port = input("Port [5432]: ") or "5432"
    dbname = input("Database Name [pimsim_db]: ") or "pimsim_db"
    user = input("User [pimsim_user]: ") or "pimsim_user"
    password = getpass("Password: ")

    return {
        'host': host,
        'port': port,
        'dbname': dbname,
        'user': user,
        'password': password
    }


def test_db_connection(conn_string):
    """Tests the database connection."""
    try:
        engine = create_engine(conn_string)
        with engine.connect():
            print("\n✓ Database connection successful!")
            return True
    except OperationalError as e:
        print(f"\n✗ Connection failed: {e}", file=sys.stderr)
        return False


def postgres_url(creds):
    from urllib.parse import quote_plus

    escaped_password = quote_plus(creds['password'])
    return f"postgresql://{creds['user']}:{escaped_password}@{creds['host']}:{creds['port']}/{creds['dbname']}"


def configure_database(config, args):
    if args.sqlite:
        conn_string = f"sqlite:///{os.path.join(app.instance_path, 'pimsim.db')}"
    elif args.headless:
        # Headless mode - try once, fail if it doesn't work
        conn_string = postgres_url(get_db_credentials(args))
        if not test_db_connection(conn_string):
            sys.exit(1)
    else:
        while True:
            conn_string = postgres_url(get_db_credentials(args))
            if test_db_connection(conn_string):
                break
            retry = input("\nWould you like to try again? (y/n): ").lower()
            if retry != 'y':
                sys.exit("Database configuration aborted.")

    if not config.has_section('database'):
        config.add_section('database')
    config.set('database', 'connection_string', conn_string)
    return conn_string


def init_db(args):
    """Initialize the results database and the machine configuration."""
    print("\n" + "="*80)
    print("PIMSIM RESULTS SERVICE INITIALIZATION")
    print("="*80)

    config = configparser.RawConfigParser()
    config.read(config_path)

    if args.migrate_only:
        conn_string = app.config['SQLALCHEMY_DATABASE_URI']
    else:
        conn_string = configure_database(config, args)

    # Machine, host and kernel sections (existing values are kept)
    machine, kernel = load_config(config=config)
    write_config(config_path, machine, kernel, config)
    print(f"\n✓ Configuration saved to: {config_path}")
    print(f"  {machine.dpu_count} DPUs in {machine.rank_count} ranks, {kernel.tasklets} tasklets")

    if args.migrate_only:
        print("\nUpdating database schema (migrate-only mode)...")
    else:
        print("\nInitializing database schema...")

    # The app bound its engine at import time; use the configured database directly
    db.metadata.create_all(create_engine(conn_string))
    print("✓ Database schema initialized successfully!")

    print("\n" + "="*80)
    print(" 🎉 Initialization Complete!")
    print("="*80)

    if not args.migrate_only:
        print("\nNext steps:")
        print("  1. Start the results service:")
        print("     → python run.py                 # Development")
        print("     → python run.py --production    # Waitress")
        print("\n  2. Record benchmark runs:")
        print("     → python pimbench.py --record query 6")
        print("\n  3. Calibrate the machine model:")
        print(f"     → python pimbench.py calibrate --save {config_path}")
    print("="*80)


if __name__ == '__main__':
    parser = argparse.ArgumentParser(
        description='Initialize the pimsim results database and machine configuration',
        formatter_class=argparse.RawDescriptionHelpFormatter
    )
    parser.add_argument('--sqlite', action='store_true',
                        help='Use a local SQLite database in the instance directory')
    parser.add_argument('--headless', action='store_true',
                        help='Run in non-interactive mode (for automated installs)')
    parser.add_argument('--db-host', default='localhost',
                        help='Database host (default: localhost)')
    parser.add_argument('--db-port', default='5432',
                        help='Database port (default: 5432)')
    parser.add_argument('--db-name', default='pimsim_db',
                        help='Database name (default: pimsim_db)')
    parser.add_argument('--db-user', default='pimsim_user',
                        help='Database user (default: pimsim_user)')
    parser.add_argument('--db-password', default='',
                        help='Database password (required for headless mode)')
    parser.add_argument('--migrate-only', action='store_true',
                        help='Only create missing tables in the configured database')

    args = parser.parse_args()

    if args.headless and not args.sqlite and not args.db_password:
        print("Error: --db-password is required when using --headless mode", file=sys.stderr)
        sys.exit(1)

    init_db(args)
