"""hushspeak test suite."""
