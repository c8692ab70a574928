"""Test suite for the forcing lab"""
