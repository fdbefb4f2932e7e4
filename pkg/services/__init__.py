"""SPDE Volatility Lab - Services Package"""
