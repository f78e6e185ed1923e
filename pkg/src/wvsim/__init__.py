"""Simulator of a Widevine-style DRM key ladder: CDM, servers, wire codec and CLI."""

__version__ = "0.1.0"
