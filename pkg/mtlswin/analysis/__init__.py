# Evaluation: metrics and Grad-CAM
