"""Sequential AVL-tree map with integer keys.  Not thread-safe by design."""

__all__ = ["AvlMap"]


class _Node:
    __slots__ = ("key", "value", "height", "left", "right")

    def __init__(self, key, value):
        self.key = key
        self.value = value
        self.height = 1
        self.left = None
        self.right = None


def _h(node):
    return node.height if node is not None else 0


def _fix(node):
    hl = node.left.height if node.left is not None else 0
    hr = node.right.height if node.right is not None else 0
    node.height = (hl if hl > hr else hr) + 1


def _rotate_right(y):
    x = y.left
    y.left = x.right
    x.right = y
    _fix(y)
    _fix(x)
    return x


def _rotate_left(x):
    y = x.right
    x.right = y.left
    y.left = x
    _fix(x)
    _fix(y)
    return y


def _rebalance(node):
    _fix(node)
    bal = _h(node.left) - _h(node.right)
    if bal > 1:
        if _h(node.left.left) < _h(node.left.right):
            node.left = _rotate_left(node.left)
        return _rotate_right(node)
    if bal < -1:
        if _h(node.right.right) < _h(node.right.left):
            node.right = _rotate_right(node.right)
        return _rotate_left(node)
    return node


class AvlMap:
    def __init__(self):
        self.root = None
        self.size = 0

    def __len__(self):
        return self.size

    def __contains__(self, key):
        return self.lookup(key) is not None

    def lookup(self, key):
        node = self.root
        while node is not None:
            if key < node.key:
                node = node.left
            elif key > node.key:
                node = node.right
            else:
                return node.value
        return None

    def insert(self, key, value):
        """Add `key`; returns False (leaving the tree untouched) if it exists."""
        path = []
        node = self.root
        while node is not None:
            if key == node.key:
                return False
            path.append(node)
            node = node.left if key < node.key else node.right
        new = _Node(key, value)
        self.size += 1
        if not path:
            self.root = new
            return True
        parent = path[-1]
        if key < parent.key:
            parent.left = new
        else:
            parent.right = new
        self._retrace(path)
        return True

    def remove(self, key):
        path = []
        node = self.root
        while node is not None and node.key != key:
            path.append(node)
            node = node.left if key < node.key else node.right
        if node is None:
            return False
        self.size -= 1
        if node.left is not None and node.right is not None:
            # Swap in the in-order successor, then unlink that instead.
            path.append(node)
            succ = node.right
            while succ.left is not None:
                path.append(succ)
                succ = succ.left
            node.key, node.value = succ.key, succ.value
            node = succ
        child = node.left if node.left is not None else node.right
        self._replace(path[-1] if path else None, node, child)
        self._retrace(path)
        return True

    def _replace(self, parent, old, new):
        if parent is None:
            self.root = new
        elif parent.left is old:
            parent.left = new
        else:
            parent.right = new

    def _retrace(self, path):
        for i in range(len(path) - 1, -1, -1):
            node = path[i]
            old_height = node.height
            fixed = _rebalance(node)
            if fixed is not node:
                self._replace(path[i - 1] if i else None, node, fixed)
            elif fixed.height == old_height:
                break

    def items(self):
        out = []
        stack = []
        node = self.root
        while stack or node is not None:
            while node is not None:
                stack.append(node)
                node = node.left
            node = stack.pop()
            out.append((node.key, node.value))
            node = node.right
        return out

    def keys(self):
        return [k for k, _ in self.items()]

    def check(self):
        """Raise AssertionError unless ordering, heights, balance and size all hold."""

        def visit(node, lo, hi):
            if node is None:
                return 0, 0
            assert (lo is None or node.key > lo) and (hi is None or node.key < hi), "BST order"
            hl, nl = visit(node.left, lo, node.key)
            hr, nr = visit(node.right, node.key, hi)
            assert abs(hl - hr) <= 1, f"balance factor {hl - hr} at key {node.key}"
            assert node.height == max(hl, hr) + 1, f"stale height at key {node.key}"
            return node.height, nl + nr + 1

        _, n = visit(self.root, None, None)
        assert n == self.size, f"size {self.size} but {n} nodes"
