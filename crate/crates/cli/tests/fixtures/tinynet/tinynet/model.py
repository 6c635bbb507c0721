from tinynet.layers import Linear, ReLU


class MLP:
    """Two-layer perceptron. Inputs arrive flattened and are viewed as
    (batch_size, in_features) before the first layer."""

    def __init__(self, in_features, hidden, out_features, batch_size, rng=None):
        self.in_features = in_features
        self.batch_size = batch_size
        self.layers = [Linear(in_features, hidden, rng), ReLU(), Linear(hidden, out_features, rng)]

    def forward(self, x):
        # BUG: the view uses the configured batch size instead of the real one,
        # so a short final batch cannot be reshaped.
        h = x.reshape(self.batch_size, self.in_features)
        for layer in self.layers:
            h = layer(h)
        return h

    __call__ = forward

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]
