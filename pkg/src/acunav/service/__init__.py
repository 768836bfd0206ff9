"""Streaming guidance service: wire protocol, session engine, and host."""

from .engine import SessionEngine, replay_log
from .scene import SceneBundle, load_scene
from .wire import PROTOCOL_VERSION, WireError, decode, encode

__all__ = ["SessionEngine", "replay_log", "SceneBundle", "load_scene",
           "PROTOCOL_VERSION", "WireError", "decode", "encode"]
