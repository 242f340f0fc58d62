"""Shared Flask extensions; imported by the app and the models."""

from flask_sqlalchemy import SQLAlchemy

db = SQLAlchemy()
