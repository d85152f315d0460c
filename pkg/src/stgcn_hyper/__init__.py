"""Hypergraph-based spatio-temporal forecasting and anomaly detection."""
