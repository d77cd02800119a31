//! Plain-text tensor dumps used by test fixtures.
//!
//! ```text
//! B C H W
//! v0 v1 v2 ...
//! ```
//! The header holds the four extents; the values follow in row-major order,
//! separated by any whitespace.

use std::path::Path;

use super::{Float, Shape, Tensor};
use crate::error::{shape_err, CtdError, Result};

pub fn format_dump<T: Float>(t: &Tensor<T>) -> String {
    let s = t.shape();
    let mut out = format!("{} {} {} {}\n", s.b, s.c, s.h, s.w);
    let data = t.data();
    for row in data.chunks(s.w) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_dump<T: Float>(text: &str) -> Result<Tensor<T>> {
    let mut tokens = text.split_whitespace();
    let mut dims = [0usize; 4];
    for d in &mut dims {
        let tok = tokens
            .next()
            .ok_or_else(|| shape_err!("tensor dump: header needs four extents"))?;
        *d = tok
            .parse()
            .map_err(|_| shape_err!("tensor dump: bad extent `{tok}`"))?;
    }
    let data = tokens
        .map(|tok| {
            tok.parse::<f64>()
                .map(T::lit)
                .map_err(|_| CtdError::Validation(format!("tensor dump: bad value `{tok}`")))
        })
        .collect::<Result<Vec<T>>>()?;
    Tensor::new(Shape::from(dims), data)
}

pub fn write_dump<T: Float>(path: &Path, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path, format_dump(t)).map_err(|e| CtdError::io(path, e))
}

pub fn read_dump<T: Float>(path: &Path) -> Result<Tensor<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| CtdError::io(path, e))?;
    parse_dump(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_exactly() {
        let t = Tensor::<f64>::from_fn([2, 1, 2, 3], |i| (i as f64).sqrt() - 1.0 / 3.0);
        let back: Tensor<f64> = parse_dump(&format_dump(&t)).unwrap();
        assert!(back.same_values(&t));
    }

    #[test]
    fn reads_hand_written_fixture() {
        let t: Tensor<f32> = parse_dump("1 1 2 2\n0 1\n2 3.5\n").unwrap();
        assert_eq!(t.to_vec(), vec![0.0, 1.0, 2.0, 3.5]);
    }

    #[test]
    fn rejects_short_or_malformed() {
        assert!(parse_dump::<f32>("1 1 2 2\n0 1 2").is_err());
        assert!(parse_dump::<f32>("1 1 2\n").is_err());
        assert!(parse_dump::<f32>("1 1 1 1\nx").is_err());
    }
}
