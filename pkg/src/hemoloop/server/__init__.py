from .app import Service

__all__ = ["Service"]
