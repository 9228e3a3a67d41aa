from .service import Gateway, GatewayConfig, GatewayError, create_app, serve

__all__ = ["Gateway", "GatewayConfig", "GatewayError", "create_app", "serve"]
