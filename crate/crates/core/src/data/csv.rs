//! Plain CSV output: header row, comma separators, `.` decimals, LF line ends.

use std::fmt::Write as _;
use std::path::Path;

use super::write_atomic;
use crate::error::{Error, Result};
use crate::explain::{MapKind, PixelMap};

pub fn write_csv<I, S>(path: impl AsRef<Path>, header: &str, rows: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut text = String::from(header);
    text.push('\n');
    for row in rows {
        text.push_str(row.as_ref());
        text.push('\n');
    }
    write_atomic(path.as_ref(), text.as_bytes())
}

/// Raw map values as `y,x,value` rows; values print in shortest
/// round-trip form so they reload bit-exactly.
pub fn write_map_csv(map: &PixelMap, path: impl AsRef<Path>) -> Result<()> {
    let mut text = String::from("y,x,value\n");
    for y in 0..map.height() {
        for x in 0..map.width() {
            let _ = writeln!(text, "{y},{x},{}", map.get(y, x));
        }
    }
    write_atomic(path.as_ref(), text.as_bytes())
}

pub fn read_map_csv(path: impl AsRef<Path>, kind: MapKind) -> Result<PixelMap> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    let mut offset = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let row = line.trim_end_matches('\n');
        if i > 0 && !row.is_empty() {
            let fields: Vec<&str> = row.split(',').collect();
            let parsed = match fields[..] {
                [y, x, v] => y
                    .parse::<usize>()
                    .ok()
                    .zip(x.parse::<usize>().ok())
                    .zip(v.parse::<f64>().ok()),
                _ => None,
            };
            match parsed {
                Some(((y, x), v)) => entries.push((y, x, v)),
                None => {
                    return Err(Error::Parse {
                        offset,
                        msg: format!("bad map row {row:?}"),
                    })
                }
            }
        }
        offset += line.len();
    }
    let height = entries.iter().map(|e| e.0 + 1).max().unwrap_or(0);
    let width = entries.iter().map(|e| e.1 + 1).max().unwrap_or(0);
    let mut values = vec![f64::NAN; height * width];
    for (y, x, v) in entries {
        values[y * width + x] = v;
    }
    PixelMap::new(height, width, values, kind)
}
