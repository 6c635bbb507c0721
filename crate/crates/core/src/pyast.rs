//! Python syntax-tree helpers: line positions, a flow-insensitive scope walk,
//! and import extraction.

use std::collections::{BTreeMap, HashMap};

use tree_sitter::Node;

pub(crate) fn start_line(node: Node<'_>) -> usize {
    node.start_position().row + 1
}

/// Last line a node occupies (a node ending at column 0 ends on the previous row).
pub(crate) fn end_line(node: Node<'_>) -> usize {
    let end = node.end_position();
    if end.column == 0 && end.row > node.start_position().row {
        end.row
    } else {
        end.row + 1
    }
}

pub(crate) fn text<'s>(node: Node<'_>, source: &'s str) -> &'s str {
    &source[node.byte_range()]
}

pub(crate) fn named_children(node: Node<'_>) -> Vec<Node<'_>> {
    let mut cursor = node.walk();
    node.named_children(&mut cursor).collect()
}

/// Pre-order traversal of `node` and all its descendants.
pub(crate) fn descendants(node: Node<'_>) -> Vec<Node<'_>> {
    let mut out = Vec::new();
    let mut stack = vec![node];
    while let Some(n) = stack.pop() {
        out.push(n);
        let mut cursor = n.walk();
        let children: Vec<Node<'_>> = n.named_children(&mut cursor).collect();
        stack.extend(children.into_iter().rev());
    }
    out
}

pub const BUILTINS: &[&str] = &[
    "abs", "aiter", "all", "anext", "any", "ascii", "bin", "bool", "breakpoint", "bytearray", "bytes", "callable",
    "chr", "classmethod", "compile", "complex", "copyright", "credits", "delattr", "dict", "dir", "divmod",
    "enumerate", "eval", "exec", "exit", "filter", "float", "format", "frozenset", "getattr", "globals", "hasattr",
    "hash", "help", "hex", "id", "input", "int", "isinstance", "issubclass", "iter", "len", "license", "list",
    "locals", "map", "max", "memoryview", "min", "next", "object", "oct", "open", "ord", "pow", "print", "property",
    "quit", "range", "repr", "reversed", "round", "set", "setattr", "slice", "sorted", "staticmethod", "str", "sum",
    "super", "tuple", "type", "vars", "zip", "__import__", "__name__", "__file__", "__doc__", "__spec__",
    "__package__", "__builtins__", "__debug__", "__loader__", "__annotations__", "__dict__", "__class__",
    "NotImplemented", "Ellipsis", "None", "True", "False", "self", "cls",
    "ArithmeticError", "AssertionError", "AttributeError", "BaseException", "BaseExceptionGroup",
    "BlockingIOError", "BrokenPipeError", "BufferError", "BytesWarning", "ChildProcessError",
    "ConnectionAbortedError", "ConnectionError", "ConnectionRefusedError", "ConnectionResetError",
    "DeprecationWarning", "EOFError", "EncodingWarning", "EnvironmentError", "Exception", "ExceptionGroup",
    "FileExistsError", "FileNotFoundError", "FloatingPointError", "FutureWarning", "GeneratorExit", "IOError",
    "ImportError", "ImportWarning", "IndentationError", "IndexError", "InterruptedError", "IsADirectoryError",
    "KeyError", "KeyboardInterrupt", "LookupError", "MemoryError", "ModuleNotFoundError", "NameError",
    "NotADirectoryError", "NotImplementedError", "OSError", "OverflowError", "PendingDeprecationWarning",
    "PermissionError", "ProcessLookupError", "RecursionError", "ReferenceError", "ResourceWarning",
    "RuntimeError", "RuntimeWarning", "StopAsyncIteration", "StopIteration", "SyntaxError", "SyntaxWarning",
    "SystemError", "SystemExit", "TabError", "TimeoutError", "TypeError", "UnboundLocalError",
    "UnicodeDecodeError", "UnicodeEncodeError", "UnicodeError", "UnicodeTranslateError", "UnicodeWarning",
    "UserWarning", "ValueError", "Warning", "ZeroDivisionError",
];

pub fn is_builtin(name: &str) -> bool {
    BUILTINS.contains(&name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScopeKind {
    Module,
    Function,
    Class,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindingKind {
    Definition,
    Import,
    Assignment,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Resolution {
    /// Bound at module level on the listed lines.
    Module(Vec<usize>),
    /// Bound in a function, class or comprehension scope.
    Local,
    Builtin,
    Unresolved,
}

#[derive(Debug, Clone)]
pub struct NameLoad {
    pub name: String,
    pub line: usize,
    pub resolution: Resolution,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeRef {
    pub object: String,
    pub attribute: String,
    pub line: usize,
}

#[derive(Debug)]
struct Scope {
    kind: ScopeKind,
    parent: Option<usize>,
    bound: HashMap<String, Vec<(usize, BindingKind)>>,
}

/// Result of one scope walk over a module.
#[derive(Debug)]
pub struct ScopeAnalysis {
    scopes: Vec<Scope>,
    pub loads: Vec<NameLoad>,
    pub attributes: Vec<AttributeRef>,
    /// Module contains `from x import *`, which makes undefined-name checks unsound.
    pub star_import: bool,
}

impl ScopeAnalysis {
    pub fn analyze(root: Node<'_>, source: &str) -> Self {
        let mut binder = Binder {
            source,
            scopes: vec![Scope {
                kind: ScopeKind::Module,
                parent: None,
                bound: HashMap::new(),
            }],
            raw_loads: Vec::new(),
            attributes: Vec::new(),
            star_import: false,
        };
        binder.visit(root, 0);
        let loads = binder
            .raw_loads
            .iter()
            .map(|(name, line, scope)| NameLoad {
                name: name.clone(),
                line: *line,
                resolution: binder.resolve(name, *scope),
            })
            .collect();
        Self {
            scopes: binder.scopes,
            loads,
            attributes: binder.attributes,
            star_import: binder.star_import,
        }
    }

    /// Module-level bindings: name → (line, kind).
    pub fn module_bindings(&self) -> &HashMap<String, Vec<(usize, BindingKind)>> {
        &self.scopes[0].bound
    }

    pub fn undefined(&self) -> impl Iterator<Item = &NameLoad> {
        self.loads.iter().filter(|l| l.resolution == Resolution::Unresolved)
    }
}

struct Binder<'s> {
    source: &'s str,
    scopes: Vec<Scope>,
    raw_loads: Vec<(String, usize, usize)>,
    attributes: Vec<AttributeRef>,
    star_import: bool,
}

impl<'s> Binder<'s> {
    fn push_scope(&mut self, kind: ScopeKind, parent: usize) -> usize {
        self.scopes.push(Scope {
            kind,
            parent: Some(parent),
            bound: HashMap::new(),
        });
        self.scopes.len() - 1
    }

    fn bind(&mut self, scope: usize, name: &str, line: usize, kind: BindingKind) {
        self.scopes[scope].bound.entry(name.to_string()).or_default().push((line, kind));
    }

    fn load(&mut self, scope: usize, node: Node<'_>) {
        self.raw_loads
            .push((text(node, self.source).to_string(), start_line(node), scope));
    }

    fn resolve(&self, name: &str, scope: usize) -> Resolution {
        let mut current = Some(scope);
        let mut first = true;
        while let Some(idx) = current {
            let s = &self.scopes[idx];
            let visible = first || s.kind != ScopeKind::Class;
            if visible {
                if let Some(bindings) = s.bound.get(name) {
                    return match s.kind {
                        ScopeKind::Module => Resolution::Module(bindings.iter().map(|b| b.0).collect()),
                        _ => Resolution::Local,
                    };
                }
            }
            first = false;
            current = s.parent;
        }
        if is_builtin(name) {
            Resolution::Builtin
        } else {
            Resolution::Unresolved
        }
    }

    fn visit_children(&mut self, node: Node<'_>, scope: usize) {
        for child in named_children(node) {
            self.visit(child, scope);
        }
    }

    fn bind_pattern(&mut self, node: Node<'_>, scope: usize, kind: BindingKind) {
        match node.kind() {
            "identifier" => {
                let name = text(node, self.source).to_string();
                self.bind(scope, &name, start_line(node), kind);
            }
            "attribute" | "subscript" => self.visit(node, scope),
            _ => {
                for child in named_children(node) {
                    self.bind_pattern(child, scope, kind);
                }
            }
        }
    }

    fn bind_parameters(&mut self, params: Node<'_>, inner: usize, outer: usize) {
        for p in named_children(params) {
            match p.kind() {
                "identifier" | "list_splat_pattern" | "dictionary_splat_pattern" | "tuple_pattern" => {
                    self.bind_pattern(p, inner, BindingKind::Assignment)
                }
                "default_parameter" | "typed_default_parameter" => {
                    if let Some(name) = p.child_by_field_name("name") {
                        self.bind_pattern(name, inner, BindingKind::Assignment);
                    }
                    if let Some(t) = p.child_by_field_name("type") {
                        self.visit(t, outer);
                    }
                    if let Some(v) = p.child_by_field_name("value") {
                        self.visit(v, outer);
                    }
                }
                "typed_parameter" => {
                    for c in named_children(p) {
                        if c.kind() == "type" {
                            self.visit(c, outer);
                        } else {
                            self.bind_pattern(c, inner, BindingKind::Assignment);
                        }
                    }
                }
                _ => {}
            }
        }
    }

    fn visit(&mut self, node: Node<'_>, scope: usize) {
        match node.kind() {
            "identifier" => self.load(scope, node),
            "function_definition" => {
                if let Some(name) = node.child_by_field_name("name") {
                    let n = text(name, self.source).to_string();
                    self.bind(scope, &n, start_line(name), BindingKind::Definition);
                }
                if let Some(rt) = node.child_by_field_name("return_type") {
                    self.visit(rt, scope);
                }
                let inner = self.push_scope(ScopeKind::Function, scope);
                if let Some(params) = node.child_by_field_name("parameters") {
                    self.bind_parameters(params, inner, scope);
                }
                if let Some(body) = node.child_by_field_name("body") {
                    self.visit(body, inner);
                }
            }
            "lambda" => {
                let inner = self.push_scope(ScopeKind::Function, scope);
                if let Some(params) = node.child_by_field_name("parameters") {
                    self.bind_parameters(params, inner, scope);
                }
                if let Some(body) = node.child_by_field_name("body") {
                    self.visit(body, inner);
                }
            }
            "class_definition" => {
                if let Some(name) = node.child_by_field_name("name") {
                    let n = text(name, self.source).to_string();
                    self.bind(scope, &n, start_line(name), BindingKind::Definition);
                }
                if let Some(sc) = node.child_by_field_name("superclasses") {
                    self.visit(sc, scope);
                }
                let inner = self.push_scope(ScopeKind::Class, scope);
                if let Some(body) = node.child_by_field_name("body") {
                    self.visit(body, inner);
                }
            }
            "list_comprehension" | "set_comprehension" | "dictionary_comprehension" | "generator_expression" => {
                let inner = self.push_scope(ScopeKind::Function, scope);
                let children = named_children(node);
                for c in &children {
                    if c.kind() == "for_in_clause" {
                        if let Some(left) = c.child_by_field_name("left") {
                            self.bind_pattern(left, inner, BindingKind::Assignment);
                        }
                    }
                }
                for c in children {
                    if c.kind() == "for_in_clause" {
                        let left_id = c.child_by_field_name("left").map(|l| l.id());
                        for cc in named_children(c) {
                            if Some(cc.id()) != left_id {
                                self.visit(cc, inner);
                            }
                        }
                    } else {
                        self.visit(c, inner);
                    }
                }
            }
            "assignment" => {
                if let Some(left) = node.child_by_field_name("left") {
                    self.bind_pattern(left, scope, BindingKind::Assignment);
                }
                if let Some(t) = node.child_by_field_name("type") {
                    self.visit(t, scope);
                }
                if let Some(right) = node.child_by_field_name("right") {
                    self.visit(right, scope);
                }
            }
            "augmented_assignment" => {
                if let Some(left) = node.child_by_field_name("left") {
                    self.visit(left, scope);
                    if left.kind() == "identifier" {
                        self.bind_pattern(left, scope, BindingKind::Assignment);
                    }
                }
                if let Some(right) = node.child_by_field_name("right") {
                    self.visit(right, scope);
                }
            }
            "for_statement" | "for_in_clause" => {
                let left = node.child_by_field_name("left");
                if let Some(l) = left {
                    self.bind_pattern(l, scope, BindingKind::Assignment);
                }
                for c in named_children(node) {
                    if Some(c.id()) != left.map(|l| l.id()) {
                        self.visit(c, scope);
                    }
                }
            }
            "as_pattern" => {
                for c in named_children(node) {
                    if c.kind() == "as_pattern_target" {
                        self.bind_pattern(c, scope, BindingKind::Assignment);
                    } else {
                        self.visit(c, scope);
                    }
                }
            }
            "except_clause" => {
                let alias = node.child_by_field_name("alias");
                if let Some(a) = alias {
                    self.bind_pattern(a, scope, BindingKind::Assignment);
                }
                for c in named_children(node) {
                    if Some(c.id()) != alias.map(|a| a.id()) {
                        self.visit(c, scope);
                    }
                }
            }
            "named_expression" => {
                if let Some(n) = node.child_by_field_name("name") {
                    self.bind_pattern(n, scope, BindingKind::Assignment);
                }
                if let Some(v) = node.child_by_field_name("value") {
                    self.visit(v, scope);
                }
            }
            "import_statement" | "import_from_statement" => {
                for binding in import_bindings(node, self.source) {
                    self.bind(scope, &binding.bound, binding.line, BindingKind::Import);
                }
                if node.kind() == "import_from_statement"
                    && named_children(node).iter().any(|c| c.kind() == "wildcard_import")
                {
                    self.star_import = true;
                }
            }
            "future_import_statement" => {}
            "global_statement" | "nonlocal_statement" => {
                for c in named_children(node) {
                    if c.kind() == "identifier" {
                        let n = text(c, self.source).to_string();
                        self.bind(scope, &n, start_line(c), BindingKind::Assignment);
                        if node.kind() == "global_statement" {
                            self.bind(0, &n, start_line(c), BindingKind::Assignment);
                        }
                    }
                }
            }
            "keyword_argument" => {
                if let Some(v) = node.child_by_field_name("value") {
                    self.visit(v, scope);
                }
            }
            "attribute" => {
                if let Some(obj) = node.child_by_field_name("object") {
                    if obj.kind() == "identifier" {
                        if let Some(attr) = node.child_by_field_name("attribute") {
                            self.attributes.push(AttributeRef {
                                object: text(obj, self.source).to_string(),
                                attribute: text(attr, self.source).to_string(),
                                line: start_line(node),
                            });
                        }
                    }
                    self.visit(obj, scope);
                }
            }
            "case_pattern" => self.bind_pattern(node, scope, BindingKind::Assignment),
            "comment" | "string_content" | "escape_sequence" => {}
            _ => self.visit_children(node, scope),
        }
    }
}

/// A name bound by an import statement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImportBinding {
    /// Name introduced into the namespace.
    pub bound: String,
    /// Dotted module path, with leading dots for relative imports.
    pub module: String,
    /// Imported member for `from m import name`.
    pub member: Option<String>,
    pub line: usize,
}

pub fn import_bindings(node: Node<'_>, source: &str) -> Vec<ImportBinding> {
    let line = start_line(node);
    let mut out = Vec::new();
    match node.kind() {
        "import_statement" => {
            let mut cursor = node.walk();
            for name in node.children_by_field_name("name", &mut cursor) {
                match name.kind() {
                    "dotted_name" => {
                        let module = text(name, source).to_string();
                        let bound = module.split('.').next().unwrap_or(&module).to_string();
                        out.push(ImportBinding {
                            bound,
                            module,
                            member: None,
                            line,
                        });
                    }
                    "aliased_import" => {
                        let module = name.child_by_field_name("name").map(|n| text(n, source)).unwrap_or("");
                        let alias = name.child_by_field_name("alias").map(|n| text(n, source)).unwrap_or(module);
                        out.push(ImportBinding {
                            bound: alias.to_string(),
                            module: module.to_string(),
                            member: None,
                            line,
                        });
                    }
                    _ => {}
                }
            }
        }
        "import_from_statement" => {
            let module = node
                .child_by_field_name("module_name")
                .map(|n| text(n, source).replace(char::is_whitespace, ""))
                .unwrap_or_default();
            let mut cursor = node.walk();
            for name in node.children_by_field_name("name", &mut cursor) {
                let (member, bound) = match name.kind() {
                    "dotted_name" => {
                        let m = text(name, source).to_string();
                        (m.clone(), m)
                    }
                    "aliased_import" => {
                        let m = name.child_by_field_name("name").map(|n| text(n, source)).unwrap_or("");
                        let a = name.child_by_field_name("alias").map(|n| text(n, source)).unwrap_or(m);
                        (m.to_string(), a.to_string())
                    }
                    _ => continue,
                };
                out.push(ImportBinding {
                    bound,
                    module: module.clone(),
                    member: Some(member),
                    line,
                });
            }
        }
        _ => {}
    }
    out
}

/// Every import statement anywhere under `root`.
pub fn all_imports(root: Node<'_>, source: &str) -> Vec<ImportBinding> {
    descendants(root)
        .into_iter()
        .filter(|n| matches!(n.kind(), "import_statement" | "import_from_statement"))
        .flat_map(|n| import_bindings(n, source))
        .collect()
}

/// Resolves a possibly relative module path against the importing module.
pub fn absolute_module(module: &str, importer: &str, importer_is_package: bool) -> String {
    let dots = module.chars().take_while(|&c| c == '.').count();
    if dots == 0 {
        return module.to_string();
    }
    let mut base: Vec<&str> = importer.split('.').filter(|s| !s.is_empty()).collect();
    let strip = if importer_is_package { dots - 1 } else { dots };
    for _ in 0..strip {
        base.pop();
    }
    let rest = &module[dots..];
    if !rest.is_empty() {
        base.push(rest);
    }
    base.join(".")
}

/// Top-level function and class definitions with their start lines.
pub fn top_level_definitions(root: Node<'_>, source: &str) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for child in named_children(root) {
        let def = match child.kind() {
            "decorated_definition" => child.child_by_field_name("definition"),
            "function_definition" | "class_definition" => Some(child),
            _ => None,
        };
        if let Some(name) = def.and_then(|d| d.child_by_field_name("name")) {
            out.insert(text(name, source).to_string(), start_line(child));
        }
    }
    out
}
