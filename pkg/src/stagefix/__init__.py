"""Stage-aware audit, counterfactual localization and replay repair for RCA agent traces."""
