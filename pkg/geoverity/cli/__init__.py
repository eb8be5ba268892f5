"""Command-line entry points for geoverity daemons and tools."""
