"""Simulador de un enlace BBM92 bajo ataque de cegado de detectores."""
