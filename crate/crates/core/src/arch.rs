//! Line-oriented architecture description:
//!
//! ```text
//! CNA in out k stride norm act
//! AB  in out {Ghost|Hada} arg k stride
//! FN  in classes hidden dropout
//! ```
//!
//! Blank lines and `#` comments are ignored.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Expansion {
    /// Ghost module with expansion ratio `n / m`.
    Ghost { ratio: f64 },
    /// Cross-Hadamard expansion selecting `c_sel` channels.
    Hada { c_sel: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BottleneckSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub expansion: Expansion,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Cna { c_in: usize, c_out: usize, kernel: usize, stride: usize, norm: String, act: String },
    Ab(BottleneckSpec),
    Fn { c_in: usize, classes: usize, hidden: usize, dropout: f64 },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Cna { .. } => "CNA",
            LayerSpec::Ab(_) => "AB",
            LayerSpec::Fn { .. } => "FN",
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Cna { c_in, c_out, kernel, stride, norm, act } => {
                write!(f, "CNA {c_in} {c_out} {kernel} {stride} {norm} {act}")
            }
            LayerSpec::Ab(b) => {
                let (kind, arg) = match b.expansion {
                    Expansion::Ghost { ratio } => ("Ghost", format!("{ratio:?}")),
                    Expansion::Hada { c_sel } => ("Hada", c_sel.to_string()),
                };
                write!(f, "AB {} {} {kind} {arg} {} {}", b.c_in, b.c_out, b.kernel, b.stride)
            }
            LayerSpec::Fn { c_in, classes, hidden, dropout } => write!(f, "FN {c_in} {classes} {hidden} {dropout}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub layers: Vec<LayerSpec>,
}

fn field<T: FromStr>(tok: &[&str], i: usize, line: usize, what: &str) -> Result<T> {
    let raw = tok.get(i).ok_or_else(|| Error::Parse { line, msg: format!("missing {what}") })?;
    raw.parse().map_err(|_| Error::Parse { line, msg: format!("bad {what} `{raw}`") })
}

fn positive(v: usize, line: usize, what: &str) -> Result<usize> {
    if v == 0 {
        return Err(Error::Parse { line, msg: format!("{what} must be positive") });
    }
    Ok(v)
}

impl FromStr for ArchSpec {
    type Err = Error;

    fn from_str(src: &str) -> Result<Self> {
        let mut layers = Vec::new();
        for (no, raw) in src.lines().enumerate() {
            let line = no + 1;
            let text = raw.split('#').next().unwrap_or("").trim();
            if text.is_empty() {
                continue;
            }
            let tok: Vec<&str> = text.split_whitespace().collect();
            let expect = |n: usize| {
                if tok.len() != n {
                    Err(Error::Parse { line, msg: format!("{} takes {} fields, got {}", tok[0], n - 1, tok.len() - 1) })
                } else {
                    Ok(())
                }
            };
            let layer = match tok[0] {
                "CNA" => {
                    expect(7)?;
                    LayerSpec::Cna {
                        c_in: positive(field(&tok, 1, line, "input channels")?, line, "input channels")?,
                        c_out: positive(field(&tok, 2, line, "output channels")?, line, "output channels")?,
                        kernel: positive(field(&tok, 3, line, "kernel")?, line, "kernel")?,
                        stride: positive(field(&tok, 4, line, "stride")?, line, "stride")?,
                        norm: tok[5].to_string(),
                        act: tok[6].to_string(),
                    }
                }
                "AB" => {
                    expect(7)?;
                    let c_in = positive(field(&tok, 1, line, "input channels")?, line, "input channels")?;
                    let expansion = match tok[3] {
                        "Ghost" => {
                            let ratio: f64 = field(&tok, 4, line, "ghost ratio")?;
                            if !(ratio >= 1.0) {
                                return Err(Error::Parse { line, msg: format!("ghost ratio {ratio} below 1") });
                            }
                            Expansion::Ghost { ratio }
                        }
                        "Hada" => {
                            let c_sel: usize = field(&tok, 4, line, "selected channels")?;
                            if c_sel < 2 || c_sel > c_in {
                                return Err(Error::Parse {
                                    line,
                                    msg: format!("selected channels {c_sel} must lie in [2, {c_in}]"),
                                });
                            }
                            Expansion::Hada { c_sel }
                        }
                        other => {
                            return Err(Error::Parse { line, msg: format!("unknown expansion `{other}`") });
                        }
                    };
                    LayerSpec::Ab(BottleneckSpec {
                        c_in,
                        c_out: positive(field(&tok, 2, line, "output channels")?, line, "output channels")?,
                        expansion,
                        kernel: positive(field(&tok, 5, line, "kernel")?, line, "kernel")?,
                        stride: positive(field(&tok, 6, line, "stride")?, line, "stride")?,
                    })
                }
                "FN" => {
                    expect(5)?;
                    let dropout: f64 = field(&tok, 4, line, "dropout")?;
                    if !(0.0..1.0).contains(&dropout) {
                        return Err(Error::Parse { line, msg: format!("dropout {dropout} outside [0, 1)") });
                    }
                    LayerSpec::Fn {
                        c_in: positive(field(&tok, 1, line, "input features")?, line, "input features")?,
                        classes: positive(field(&tok, 2, line, "classes")?, line, "classes")?,
                        hidden: positive(field(&tok, 3, line, "hidden width")?, line, "hidden width")?,
                        dropout,
                    }
                }
                other => return Err(Error::Parse { line, msg: format!("unknown layer kind `{other}`") }),
            };
            layers.push(layer);
        }
        if layers.is_empty() {
            return Err(Error::Parse { line: 0, msg: "architecture has no layers".into() });
        }
        Ok(ArchSpec { layers })
    }
}

/// The 16-layer small reference network.
pub const REFERENCE_SMALL: &str = "\
# stem and stage 1
CNA 3 32 2 2 BN None
CNA 32 48 2 2 BN HS
CNA 48 32 1 1 BN HS
# stage 2
AB 32 64 Ghost 4.0 2 2
AB 64 64 Ghost 2.0 3 1
# stage 3
AB 64 96 Ghost 4.0 2 2
AB 96 96 Hada 16 5 1
AB 96 96 Hada 16 5 1
AB 96 96 Ghost 2.0 5 1
AB 96 96 Hada 16 5 1
AB 96 96 Hada 16 5 1
# stage 4
AB 96 128 Ghost 6.0 2 2
AB 128 128 Hada 32 7 1
AB 128 128 Hada 32 7 1
# head
CNA 128 960 1 1 BN HS
FN 960 100 1280 0.3
";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_reference_network() {
        let spec: ArchSpec = REFERENCE_SMALL.parse().unwrap();
        assert_eq!(spec.layers.len(), 16);
        assert_eq!(
            spec.layers[6],
            LayerSpec::Ab(BottleneckSpec { c_in: 96, c_out: 96, expansion: Expansion::Hada { c_sel: 16 }, kernel: 5, stride: 1 })
        );
        let again: ArchSpec = spec.layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("\n").parse().unwrap();
        assert_eq!(again, spec);
    }

    #[test]
    fn reports_line_numbers() {
        let err = "CNA 3 32 2 2 BN None\n\nAB 32 64 Hada 99 3 1\n".parse::<ArchSpec>().unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = "FN 960 100\n".parse::<ArchSpec>().unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        assert!("XYZ 1 2".parse::<ArchSpec>().is_err());
        assert!("# nothing\n".parse::<ArchSpec>().is_err());
    }
}
