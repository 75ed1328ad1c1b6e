__all__ = ["blocks", "cli", "config", "data", "db", "errors", "metrics", "network", "objective", "profiler", "train"]
