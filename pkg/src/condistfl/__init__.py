"""ConDistFL federated segmentation simulator."""
