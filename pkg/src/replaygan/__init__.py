"""Synthetic longitudinal patient records with a replay-augmented WGAN-GP."""
from .schema import Cohort, PatientRecord, VariableSchema, VariableSpec, hiv_schema

__all__ = ["Cohort", "PatientRecord", "VariableSchema", "VariableSpec", "hiv_schema"]
__version__ = "0.1.0"
