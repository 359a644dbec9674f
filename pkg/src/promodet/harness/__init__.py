"""Training/evaluation harness: config, data, schedule, training loop, CLI."""
