"""Config subpackage."""
