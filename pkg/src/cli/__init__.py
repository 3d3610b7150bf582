"""Glasshull CLI Module"""
