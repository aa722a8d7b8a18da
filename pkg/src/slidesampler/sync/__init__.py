from .client import ExactClient, RetryPolicy, ServerConfig, SyncState, pull_dataset, push_predictions
from .mockserver import MockExactServer

__all__ = ["ExactClient", "MockExactServer", "RetryPolicy", "ServerConfig", "SyncState", "pull_dataset",
           "push_predictions"]
