# This file makes the fluidps directory a Python package.
