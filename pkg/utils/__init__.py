"""
Utils package for the plane regression project.
Contains the rich console, logging setup and result tables.
"""
