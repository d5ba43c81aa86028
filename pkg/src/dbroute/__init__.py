"""Route natural-language questions to the database that can answer them."""

__version__ = "0.1.0"
