"""
Streamlit dashboard tabs
"""
