"""UAV-enabled federated learning latency minimization."""
