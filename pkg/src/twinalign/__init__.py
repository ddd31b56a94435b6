"""Virtual-twin simulator for dynamics-decoupled trajectory alignment."""

__version__ = "0.1.0"
