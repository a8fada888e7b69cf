"""HTTP service exposing the toolkit's campaigns as JSON endpoints."""
