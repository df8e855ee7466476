"""Spiking optical-flow estimation from event cameras, with a JSON report server."""
import os

from flask import Flask

__version__ = '1.0.0'

CHECKPOINT_ENV = 'SPIKEFLOW_CHECKPOINT'
DATA_ENV = 'SPIKEFLOW_DATA'


def create_app(checkpoint=None, data=None):
    """Create and configure the Flask application.

    checkpoint and data default to SPIKEFLOW_CHECKPOINT and SPIKEFLOW_DATA.
    """
    app = Flask(__name__)
    app.config['SPIKEFLOW_CHECKPOINT'] = checkpoint or os.environ.get(CHECKPOINT_ENV)
    app.config['SPIKEFLOW_DATA'] = data or os.environ.get(DATA_ENV)

    from spikeflow.routes import main
    app.register_blueprint(main)

    return app
