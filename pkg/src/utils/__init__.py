# Shared helpers, error types and metrics
