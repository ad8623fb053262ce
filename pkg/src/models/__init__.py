# Networks, distortion layer, training, inference and evaluation
