from flask import Flask
import configparser
import os
import secrets

app = Flask(__name__, instance_relative_config=True)

# Set secret key for sessions
app.config['SECRET_KEY'] = os.environ.get('SECRET_KEY') or secrets.token_hex(32)

# Service configuration
app.config['SERVICE_NAME'] = os.environ.get('SERVICE_NAME', 'pimsim')

try:
    os.makedirs(app.instance_path)
except OSError:
    pass

# Database connection and machine parameters share one config file
config_path = os.environ.get('PIMSIM_CONFIG') or os.path.join(app.instance_path, 'pimsim.conf')
config = configparser.RawConfigParser()
config.read(config_path)
app.config['PIMSIM_CONFIG'] = config_path if os.path.exists(config_path) else None

# Database configuration
app.config['SQLALCHEMY_DATABASE_URI'] = os.environ.get('DATABASE_URL') or config.get(
    'database', 'connection_string',
    fallback=f"sqlite:///{os.path.join(app.instance_path, 'pimsim.db')}")
app.config['SQLALCHEMY_TRACK_MODIFICATIONS'] = False

from extensions import db
db.init_app(app)

# Ship logs to Helm when it is configured
app.config["HELM_SERVICE_URL"] = os.environ.get("HELM_SERVICE_URL")

# Named apart from the app.helm_logger submodule, which would otherwise rebind it
service_logger = None
if app.config["HELM_SERVICE_URL"]:
    from app.helm_logger import init_helm_logger
    service_logger = init_helm_logger(
        app.config["SERVICE_NAME"],
        app.config["HELM_SERVICE_URL"]
    )

from app import routes

if service_logger:
    service_logger.info(f"{app.config['SERVICE_NAME']} service started")
