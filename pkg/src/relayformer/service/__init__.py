"""HTTP service exposing dataset generation, training, evaluation,
gradient checking and attention export."""

from .app import app, create_app  # noqa: F401
