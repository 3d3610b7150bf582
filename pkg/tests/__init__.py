"""BiblioFlow Tests"""
