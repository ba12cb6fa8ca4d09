"""Spiking deep belief network: Siegert units, PCD-trained RBMs, LIF simulation."""
