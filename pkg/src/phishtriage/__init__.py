"""Cognitive triage of reported phishing emails."""

__version__ = "0.1.0"

LABELS = ("Reciprocity", "Consistency", "SocialProof", "Authority", "Liking", "Scarcity")
