"""Training, data loading, ablation runs and the command line."""
