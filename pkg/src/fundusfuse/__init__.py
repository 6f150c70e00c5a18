"""Knowledge-enhanced multimodal joint embeddings for retinal fundus images, notes and structured data."""

__version__ = "0.1.0"
