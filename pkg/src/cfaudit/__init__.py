"""Counterfactual-unfairness audit for loan decisions using coarsened exact matching."""

__version__ = "0.1.0"

RACES = ("Black", "White")
SEXES = ("Male", "Female", "Joint", "NotAvailable")
LOAN_TYPES = ("Conventional", "FHA", "VA", "RHS_FSA")
LIENS = ("FirstLien", "SubordinateLien")
NUMERIC_FIELDS = ("income", "dti", "ltv")
