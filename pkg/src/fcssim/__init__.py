"""Coherence request selection and simulation toolkit."""
