# Masks, image datasets and checkpoint files
