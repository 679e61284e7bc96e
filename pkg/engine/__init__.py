"""Check-in ingestion, graph construction, embedding training and evaluation."""
