"""Standalone executables implementing the subprocess tool contract."""
