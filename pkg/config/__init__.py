"""
Run configuration and dashboard settings
"""
