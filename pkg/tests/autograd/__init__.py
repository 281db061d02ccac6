"""Tests for the autograd package"""
