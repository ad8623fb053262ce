# MaskWM watermarking toolkit
