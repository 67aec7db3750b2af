"""FastAPI service exposing the training and evaluation pipeline."""
