from .model import ByteLM, ModelConfig, ProbeModel
from .server import AdapterConfig, ProtocolServer, serve

__version__ = "0.1.0"

__all__ = ["ByteLM", "ModelConfig", "ProbeModel", "AdapterConfig", "ProtocolServer", "serve", "__version__"]
