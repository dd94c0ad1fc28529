"""RNS-CKKS kernels and a chiplet-mesh accelerator simulator."""
