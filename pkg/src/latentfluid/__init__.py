"""latentfluid: particle fluid simulation with learned latent physical properties.

Subsystems:
  tape / params   reverse-mode autodiff, optimizer, checkpoints
  spatial         fixed-radius neighbor search (hash grid)
  scenes / sph    classical SPH ground-truth generator
  layers          continuous convolution, GRU, MLP, positional encoding
  simnet          probabilistic particle transition model and pretraining
  render          particle-driven volume renderer
  initstate       initial state estimation from images (voxel fit)
  pipeline        visual posterior inference and prior adaptation
  metrics / seqio evaluation metrics, file formats
  config / cli    run configuration and command line
"""

__version__ = "0.1.0"
