"""Test suite for smokeseg"""
