"""
Package src containing the main modules of the project.
""" 