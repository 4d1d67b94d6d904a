# relaygrid - relay-token multi-scale segmentation on a numpy autograd core
