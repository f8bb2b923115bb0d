"""Desk-scale two-stage ASR pipeline: Conformer-CTC trained with weak
supervision then continually fine-tuned, with dialect-wise WER/CER reporting.
"""

__version__ = "0.1.0"
