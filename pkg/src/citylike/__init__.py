"""citylike: sample urban imagery, train a city classifier, and map which
world cities a held-out city's locations most resemble."""

__version__ = "0.1.0"
