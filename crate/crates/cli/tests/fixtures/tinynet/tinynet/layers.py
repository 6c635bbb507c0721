from tinynet.tensor import Matrix


class Linear:
    def __init__(self, in_features, out_features, rng=None):
        self.weight = Matrix.randn(in_features, out_features, rng)
        self.bias = [0.0] * out_features
        self.grad_weight = Matrix.zeros(in_features, out_features)
        self.grad_bias = [0.0] * out_features
        self._input = None

    def __call__(self, x):
        self._input = x
        return x.matmul(self.weight).add_row(self.bias)

    def backward(self, grad_out):
        self.grad_weight = self._input.transpose().matmul(grad_out)
        self.grad_bias = [sum(col) for col in zip(*grad_out.rows)]
        return grad_out.matmul(self.weight.transpose())

    def parameters(self):
        return [(self.weight, self.grad_weight, self.bias, self.grad_bias)]


class ReLU:
    def __init__(self):
        self._mask = None

    def __call__(self, x):
        self._mask = x.apply(lambda v: 1.0 if v > 0 else 0.0)
        return x.apply(lambda v: v if v > 0 else 0.0)

    def backward(self, grad_out):
        return Matrix([[g * m for g, m in zip(gr, mr)] for gr, mr in zip(grad_out.rows, self._mask.rows)])

    def parameters(self):
        return []
