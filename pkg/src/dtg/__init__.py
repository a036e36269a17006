"""Dependency transformer grammars."""
