from .app import SHARED_SAMPLE_ID, DatasetStore, ServiceConfig, create_app, swap_backend
from .client import ServiceClient, ServiceExecutor
from .schemas import RetrieveRequest, RetrieveResponse

__all__ = [
    "SHARED_SAMPLE_ID", "DatasetStore", "RetrieveRequest", "RetrieveResponse", "ServiceClient", "ServiceConfig",
    "ServiceExecutor", "create_app", "swap_backend",
]
