//! Relational schema description and typed scalar values.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Int,
    Float,
    String,
}

impl ColumnType {
    pub fn is_numeric(self) -> bool {
        !matches!(self, ColumnType::String)
    }

    /// Numeric types compare with each other; strings only with strings.
    pub fn compatible(self, other: ColumnType) -> bool {
        self.is_numeric() == other.is_numeric()
    }

    pub fn name(self) -> &'static str {
        match self {
            ColumnType::Int => "int",
            ColumnType::Float => "float",
            ColumnType::String => "string",
        }
    }

    pub fn parse(s: &str) -> Option<ColumnType> {
        match s {
            "int" => Some(ColumnType::Int),
            "float" => Some(ColumnType::Float),
            "string" => Some(ColumnType::String),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnDef {
    pub name: String,
    pub ty: ColumnType,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableDef {
    pub name: String,
    pub columns: Vec<ColumnDef>,
}

impl TableDef {
    pub fn column(&self, name: &str) -> Option<&ColumnDef> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }
}

/// Fully qualified column reference `table.column`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QualifiedColumn {
    pub table: String,
    pub column: String,
}

impl QualifiedColumn {
    pub fn new(table: impl Into<String>, column: impl Into<String>) -> Self {
        QualifiedColumn { table: table.into(), column: column.into() }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let (t, c) = s.split_once('.')?;
        (!t.is_empty() && !c.is_empty() && !c.contains('.')).then(|| QualifiedColumn::new(t, c))
    }
}

impl fmt::Display for QualifiedColumn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.table, self.column)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchemaError {
    #[error("line {line}: expected `table.column:type`")]
    Syntax { line: usize },
    #[error("line {line}: unknown type `{ty}` (expected int, float or string)")]
    UnknownType { line: usize, ty: String },
    #[error("line {line}: invalid identifier `{name}`")]
    BadIdentifier { line: usize, name: String },
    #[error("line {line}: duplicate column `{column}`")]
    DuplicateColumn { line: usize, column: String },
    #[error("schema declares no columns")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    tables: Vec<TableDef>,
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Parses a schema file: one `table.column:type` per line, `#` comments.
/// Tables and columns keep their first-appearance order.
pub fn parse_schema(text: &str) -> Result<Schema, SchemaError> {
    let mut tables: Vec<TableDef> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (name, ty) = content.split_once(':').ok_or(SchemaError::Syntax { line })?;
        let qc = QualifiedColumn::parse(name.trim()).ok_or(SchemaError::Syntax { line })?;
        for part in [&qc.table, &qc.column] {
            if !is_identifier(part) {
                return Err(SchemaError::BadIdentifier { line, name: part.clone() });
            }
        }
        let ty = ty.trim();
        let ty = ColumnType::parse(ty).ok_or_else(|| SchemaError::UnknownType { line, ty: ty.to_string() })?;
        let table = match tables.iter_mut().position(|t| t.name == qc.table) {
            Some(i) => &mut tables[i],
            None => {
                tables.push(TableDef { name: qc.table.clone(), columns: Vec::new() });
                tables.last_mut().unwrap()
            }
        };
        if table.column(&qc.column).is_some() {
            return Err(SchemaError::DuplicateColumn { line, column: qc.to_string() });
        }
        table.columns.push(ColumnDef { name: qc.column, ty });
    }
    if tables.is_empty() {
        return Err(SchemaError::Empty);
    }
    Ok(Schema { tables })
}

impl Schema {
    pub fn new(tables: Vec<TableDef>) -> Self {
        Schema { tables }
    }

    pub fn tables(&self) -> &[TableDef] {
        &self.tables
    }

    pub fn table(&self, name: &str) -> Option<&TableDef> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn table_index(&self, name: &str) -> Option<usize> {
        self.tables.iter().position(|t| t.name == name)
    }

    pub fn column_type(&self, c: &QualifiedColumn) -> Option<ColumnType> {
        self.table(&c.table)?.column(&c.column).map(|d| d.ty)
    }

    /// All columns, table-major in declaration order.
    pub fn columns(&self) -> Vec<QualifiedColumn> {
        self.tables
            .iter()
            .flat_map(|t| t.columns.iter().map(|c| QualifiedColumn::new(&t.name, &c.name)))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tables {
            for c in &t.columns {
                out.push_str(&format!("{}.{}:{}\n", t.name, c.name, c.ty.name()));
            }
        }
        out
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

/// A typed scalar from a query constant or a table cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Int(i64),
    Float(f64),
    Str(String),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Float(f) => Some(*f),
            Value::Str(_) => None,
        }
    }

    /// Orders numbers numerically and strings lexicographically; `None` across kinds.
    pub fn compare(&self, other: &Value) -> Option<Ordering> {
        match (self, other) {
            (Value::Int(a), Value::Int(b)) => Some(a.cmp(b)),
            (Value::Str(a), Value::Str(b)) => Some(a.cmp(b)),
            (a, b) => a.as_f64()?.partial_cmp(&b.as_f64()?),
        }
    }

    /// Parses a cell or literal as the given column type.
    pub fn parse_as(text: &str, ty: ColumnType) -> Option<Value> {
        match ty {
            ColumnType::Int => text.trim().parse().ok().map(Value::Int),
            ColumnType::Float => text.trim().parse::<f64>().ok().filter(|f| f.is_finite()).map(Value::Float),
            ColumnType::String => Some(Value::Str(text.to_string())),
        }
    }

    /// Rendering used in SQL text: floats keep a decimal point, strings are quoted.
    pub fn sql(&self) -> String {
        match self {
            Value::Int(i) => i.to_string(),
            Value::Float(f) => format!("{f:?}"),
            Value::Str(s) => crate::lexer::quote(s),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.sql())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_schema_file() {
        let s = parse_schema("# toy\nmovie.id:int\nmovie.title:string\nstudio.id:int # key\n").unwrap();
        assert_eq!(s.tables().len(), 2);
        assert_eq!(s.column_type(&QualifiedColumn::new("movie", "title")), Some(ColumnType::String));
        assert_eq!(s.columns().len(), 3);
        assert_eq!(parse_schema(&s.to_text()).unwrap(), s);
    }

    #[test]
    fn schema_errors() {
        assert_eq!(parse_schema("movie.id int"), Err(SchemaError::Syntax { line: 1 }));
        assert!(matches!(parse_schema("movie.id:date"), Err(SchemaError::UnknownType { line: 1, .. })));
        assert!(matches!(
            parse_schema("a.b:int\na.b:float"),
            Err(SchemaError::DuplicateColumn { line: 2, .. })
        ));
        assert_eq!(parse_schema("# nothing\n"), Err(SchemaError::Empty));
    }

    #[test]
    fn value_ordering() {
        assert_eq!(Value::Int(2).compare(&Value::Float(2.5)), Some(Ordering::Less));
        assert_eq!(Value::Str("a".into()).compare(&Value::Int(1)), None);
        assert_eq!(Value::Float(3.0).sql(), "3.0");
        assert_eq!(Value::parse_as("x", ColumnType::Int), None);
    }
}
