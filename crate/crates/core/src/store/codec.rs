//! Canonical text encoding of a table.
//!
//! ```text
//! name:type,name:type\n
//! v,v\n
//! ```
//!
//! Strings are quoted (with `""` escaping) iff they contain a comma, a double
//! quote or a newline. Floats use the shortest decimal that round-trips. The
//! byte sequence is the input to the snapshot hash, so it must never change.

use super::table::{Column, ColumnType, Row, Schema, TableData, Value};
use super::StoreError;

pub fn encode_table(table: &TableData) -> Vec<u8> {
    let mut out = String::new();
    out.push_str(&table.schema().to_string());
    out.push('\n');
    for row in table.rows() {
        for (i, value) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write_value(&mut out, value);
        }
        out.push('\n');
    }
    out.into_bytes()
}

fn write_value(out: &mut String, value: &Value) {
    match value {
        Value::Int(i) => out.push_str(&i.to_string()),
        Value::Float(x) => out.push_str(&format!("{x:?}")),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Str(s) => {
            if s.contains([',', '"', '\n']) {
                out.push('"');
                out.push_str(&s.replace('"', "\"\""));
                out.push('"');
            } else {
                out.push_str(s);
            }
        }
    }
}

fn decode_err(line: usize, msg: impl Into<String>) -> StoreError {
    StoreError::Decode {
        line,
        msg: msg.into(),
    }
}

pub fn decode_table(bytes: &[u8]) -> Result<TableData, StoreError> {
    let text = std::str::from_utf8(bytes).map_err(|e| decode_err(1, e.to_string()))?;
    let Some(header_end) = text.find('\n') else {
        return Err(decode_err(1, "missing header line terminator"));
    };
    let schema = decode_header(&text[..header_end])?;
    let mut rows = Vec::new();
    let mut cursor = Cursor {
        chars: text[header_end + 1..].chars().peekable(),
        line: 2,
    };
    while cursor.chars.peek().is_some() {
        let start_line = cursor.line;
        let fields = cursor.record()?;
        if fields.len() != schema.len() {
            return Err(decode_err(
                start_line,
                format!("expected {} fields, found {}", schema.len(), fields.len()),
            ));
        }
        let row = fields
            .into_iter()
            .zip(schema.columns())
            .map(|(raw, col)| parse_value(&raw, col, start_line))
            .collect::<Result<Row, _>>()?;
        rows.push(row);
    }
    TableData::new(schema, rows)
}

fn decode_header(line: &str) -> Result<Schema, StoreError> {
    let mut columns = Vec::new();
    for part in line.split(',') {
        let (name, ty) = part
            .split_once(':')
            .ok_or_else(|| decode_err(1, format!("column {part:?} is not name:type")))?;
        let ty =
            ColumnType::parse(ty).ok_or_else(|| decode_err(1, format!("unknown type {ty:?}")))?;
        columns.push(Column::new(name, ty));
    }
    Schema::new(columns)
}

fn parse_value(raw: &str, col: &Column, line: usize) -> Result<Value, StoreError> {
    let bad = || {
        decode_err(
            line,
            format!("column {}: invalid {} {raw:?}", col.name, col.ty),
        )
    };
    Ok(match col.ty {
        ColumnType::Int64 => Value::Int(raw.parse().map_err(|_| bad())?),
        ColumnType::Float64 => Value::Float(raw.parse().map_err(|_| bad())?),
        ColumnType::Bool => match raw {
            "true" => Value::Bool(true),
            "false" => Value::Bool(false),
            _ => return Err(bad()),
        },
        ColumnType::String => Value::Str(raw.to_string()),
    })
}

struct Cursor<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: usize,
}

impl Cursor<'_> {
    /// Reads fields up to and including the record-terminating newline.
    fn record(&mut self) -> Result<Vec<String>, StoreError> {
        let mut fields = Vec::new();
        loop {
            let mut field = String::new();
            if self.chars.peek() == Some(&'"') {
                self.chars.next();
                loop {
                    match self.chars.next() {
                        Some('"') if self.chars.peek() == Some(&'"') => {
                            self.chars.next();
                            field.push('"');
                        }
                        Some('"') => break,
                        Some(c) => {
                            if c == '\n' {
                                self.line += 1;
                            }
                            field.push(c);
                        }
                        None => return Err(decode_err(self.line, "unterminated quoted field")),
                    }
                }
                match self.chars.next() {
                    Some(',') => fields.push(field),
                    Some('\n') => {
                        fields.push(field);
                        self.line += 1;
                        return Ok(fields);
                    }
                    _ => return Err(decode_err(self.line, "garbage after quoted field")),
                }
            } else {
                loop {
                    match self.chars.next() {
                        Some(',') => {
                            fields.push(field);
                            break;
                        }
                        Some('\n') => {
                            fields.push(field);
                            self.line += 1;
                            return Ok(fields);
                        }
                        Some('"') => {
                            return Err(decode_err(self.line, "quote inside unquoted field"))
                        }
                        Some(c) => field.push(c),
                        None => return Err(decode_err(self.line, "missing trailing newline")),
                    }
                }
            }
        }
    }
}
