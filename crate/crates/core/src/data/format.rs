//! Line-oriented dataset files.
//!
//! One example per line, tab separated:
//! `p\ty\tbehavior:id,id,...\tprofile:id\titem:id\tctx:id`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::Example;
use crate::error::{Error, Result};

pub fn format_line(ex: &Example) -> String {
    let behavior: Vec<String> = ex.behavior.iter().map(usize::to_string).collect();
    format!(
        "{}\t{}\tbehavior:{}\tprofile:{}\titem:{}\tctx:{}",
        ex.domain,
        u8::from(ex.clicked),
        behavior.join(","),
        ex.user,
        ex.item,
        ex.context
    )
}

fn tagged<'a>(field: Option<&'a str>, tag: &str, line: usize) -> Result<&'a str> {
    let field = field.ok_or_else(|| Error::Parse {
        line,
        msg: format!("missing `{tag}:` field"),
    })?;
    field
        .strip_prefix(tag)
        .and_then(|s| s.strip_prefix(':'))
        .ok_or_else(|| Error::Parse {
            line,
            msg: format!("expected `{tag}:...`, found `{field}`"),
        })
}

fn id(s: &str, what: &str, line: usize) -> Result<usize> {
    s.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad {what} `{s}`"),
    })
}

/// Parses one line; `line` is the 1-based line number used in errors.
pub fn parse_line(text: &str, line: usize) -> Result<Example> {
    let mut fields = text.split('\t');
    let domain = id(fields.next().unwrap_or(""), "domain", line)?;
    if domain == 0 {
        return Err(Error::Parse {
            line,
            msg: "domain 0 is invalid (domains are 1-based)".into(),
        });
    }
    let clicked = match fields.next() {
        Some("0") => false,
        Some("1") => true,
        other => {
            return Err(Error::Parse {
                line,
                msg: format!("label must be 0 or 1, found {:?}", other.unwrap_or("")),
            })
        }
    };
    let behavior_text = tagged(fields.next(), "behavior", line)?;
    let behavior = if behavior_text.is_empty() {
        Vec::new()
    } else {
        behavior_text
            .split(',')
            .map(|s| id(s, "behavior id", line))
            .collect::<Result<_>>()?
    };
    let user = id(tagged(fields.next(), "profile", line)?, "profile id", line)?;
    let item = id(tagged(fields.next(), "item", line)?, "item id", line)?;
    let context = id(tagged(fields.next(), "ctx", line)?, "context id", line)?;
    if let Some(extra) = fields.next() {
        return Err(Error::Parse {
            line,
            msg: format!("unexpected trailing field `{extra}`"),
        });
    }
    Ok(Example {
        domain,
        clicked,
        behavior,
        user,
        item,
        context,
    })
}

/// Reads every example; blank lines are rejected like any malformed line.
pub fn read_dataset_from(reader: impl BufRead) -> Result<Vec<Example>> {
    reader
        .lines()
        .enumerate()
        .map(|(i, line)| parse_line(&line?, i + 1))
        .collect()
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    read_dataset_from(BufReader::new(File::open(path)?))
}

pub fn write_dataset_to(mut writer: impl Write, examples: &[Example]) -> Result<()> {
    for ex in examples {
        writeln!(writer, "{}", format_line(ex))?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_dataset(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    write_dataset_to(BufWriter::new(File::create(path)?), examples)
}
