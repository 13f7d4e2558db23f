"""
FedBatchBO Test Suite

This package contains unit tests and small end-to-end runs for the FedBatchBO harness.
"""
