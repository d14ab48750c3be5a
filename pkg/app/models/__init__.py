"""Pydantic models for run configurations and reports."""
