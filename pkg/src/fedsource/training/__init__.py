"""Training runtime: optimizer, top models, metrics, reference trainers."""
