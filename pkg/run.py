#!/usr/bin/env python3
"""
Results service runner.
Uses the Flask development server by default; --production serves with
Waitress.
"""

from dotenv import load_dotenv
import argparse
import os

# Load .flaskenv before importing app
load_dotenv('.flaskenv')

from app import app

if __name__ == '__main__':
    parser = argparse.ArgumentParser(description='Run the simulation results service')
    parser.add_argument('--production', action='store_true', help='serve with Waitress instead of the dev server')
    args = parser.parse_args()

    port = int(os.environ.get('SERVICE_PORT', 5040))
    # Bind to 127.0.0.1 (only local access)
    if args.production:
        from waitress import serve
        serve(app, host='127.0.0.1', port=port)
    else:
        app.run(host='127.0.0.1', port=port, debug=True)
