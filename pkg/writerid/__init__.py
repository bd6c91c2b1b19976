"""
Writer identification toolkit for handwritten manuscript line images.
Data curation, evaluation protocols, the CNN + SPP + NetVLAD + attention model,
training regime and reporting.
"""

__version__ = "1.0.0"
