"""NeuroSim processing element simulator."""
