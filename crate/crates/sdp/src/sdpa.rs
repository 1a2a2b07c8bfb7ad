//! SDPA sparse format (`.dat-s`) export and SDPA result-file import.
//!
//! SDPA's primal is `min c'x s.t. sum_i F_i x_i - F_0 PSD`. Our standard form
//! is its dual, so the mapping is `c = b`, `F_0 = -C`, `F_i = A_i`. In a
//! result file `yMat` is our `X`, `xMat` is our `S`, and `xVec` is `-y`.

use std::fmt::Write as _;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::blocks::BlockValue;
use crate::error::SdpError;
use crate::problem::{BlockKind, BlockSparse, SdpProblem};

/// Writes `problem` in SDPA sparse format.
pub fn write_sdpa<W: Write>(problem: &SdpProblem, mut out: W) -> Result<(), SdpError> {
    problem.validate()?;
    out.write_all(to_sdpa_string(problem).as_bytes())?;
    Ok(())
}

/// SDPA sparse text for `problem`. Values use 17 significant digits so the
/// text round-trips exactly.
pub fn to_sdpa_string(problem: &SdpProblem) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "\"sosik export");
    let _ = writeln!(s, "{}", problem.constraints.len());
    let _ = writeln!(s, "{}", problem.blocks.len());
    let sizes: Vec<String> = problem
        .blocks
        .iter()
        .map(|b| match *b {
            BlockKind::Psd(n) => format!("{n}"),
            BlockKind::Lp(n) => format!("-{n}"),
        })
        .collect();
    let _ = writeln!(s, "{}", sizes.join(" "));
    let rhs: Vec<String> = problem.rhs.iter().map(|v| format!("{v:.16e}")).collect();
    let _ = writeln!(s, "{}", rhs.join(" "));
    let mut emit = |mat: usize, a: &BlockSparse, sign: f64| {
        let mut a = a.clone();
        a.compress();
        for e in &a.entries {
            let _ = writeln!(
                s,
                "{} {} {} {} {:.16e}",
                mat,
                e.block + 1,
                e.row + 1,
                e.col + 1,
                sign * e.value
            );
        }
    };
    emit(0, &problem.objective, -1.0);
    for (i, a) in problem.constraints.iter().enumerate() {
        emit(i + 1, a, 1.0);
    }
    s
}

/// Parses SDPA sparse format back into standard form.
pub fn read_sdpa<R: Read>(mut input: R) -> Result<SdpProblem, SdpError> {
    let mut text = String::new();
    input.read_to_string(&mut text)?;
    parse_sdpa(&text)
}

pub fn parse_sdpa(text: &str) -> Result<SdpProblem, SdpError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('"') && !l.starts_with('*'));
    let mut header = |what: &str| -> Result<(usize, Vec<String>), SdpError> {
        let (ln, l) = lines.next().ok_or(SdpError::Parse {
            line: 0,
            msg: format!("missing {what}"),
        })?;
        Ok((ln, tokens(l)))
    };
    let (ln, t) = header("constraint count")?;
    let m: usize = parse_tok(t.first(), ln)?;
    let (ln, t) = header("block count")?;
    let nb: usize = parse_tok(t.first(), ln)?;
    let (ln, t) = header("block sizes")?;
    if t.len() < nb {
        return Err(SdpError::Parse {
            line: ln,
            msg: "too few block sizes".into(),
        });
    }
    let mut blocks = Vec::with_capacity(nb);
    for tok in &t[..nb] {
        let v: i64 = parse_tok(Some(tok), ln)?;
        blocks.push(if v < 0 {
            BlockKind::Lp((-v) as usize)
        } else {
            BlockKind::Psd(v as usize)
        });
    }
    let (ln, t) = header("objective vector")?;
    if t.len() < m {
        return Err(SdpError::Parse {
            line: ln,
            msg: "too few objective entries".into(),
        });
    }
    let rhs = t[..m]
        .iter()
        .map(|tok| parse_tok(Some(tok), ln))
        .collect::<Result<Vec<f64>, _>>()?;
    let mut problem = SdpProblem::new(blocks);
    problem.constraints = vec![BlockSparse::new(); m];
    problem.rhs = rhs;
    for (ln, l) in lines {
        let t = tokens(l);
        if t.len() < 5 {
            return Err(SdpError::Parse {
                line: ln,
                msg: "expected 5 fields".into(),
            });
        }
        let mat: usize = parse_tok(t.first(), ln)?;
        let blk: usize = parse_tok(t.get(1), ln)?;
        let i: usize = parse_tok(t.get(2), ln)?;
        let j: usize = parse_tok(t.get(3), ln)?;
        let v: f64 = parse_tok(t.get(4), ln)?;
        if mat > m || blk == 0 || i == 0 || j == 0 {
            return Err(SdpError::Parse {
                line: ln,
                msg: "index out of range".into(),
            });
        }
        if mat == 0 {
            problem.objective.push(blk - 1, i - 1, j - 1, -v);
        } else {
            problem.constraints[mat - 1].push(blk - 1, i - 1, j - 1, v);
        }
    }
    problem.objective.compress();
    for a in &mut problem.constraints {
        a.compress();
    }
    problem.validate()?;
    Ok(problem)
}

/// Solution read from an SDPA result file, already mapped to standard form.
#[derive(Debug, Clone)]
pub struct SdpaSolution {
    pub primal: Vec<BlockValue>,
    pub dual: Vec<f64>,
    pub dual_slack: Vec<BlockValue>,
}

/// Parses the `xVec`, `xMat` and `yMat` sections of an SDPA result file.
pub fn parse_sdpa_solution(text: &str, blocks: &[BlockKind]) -> Result<SdpaSolution, SdpError> {
    let xvec = section(text, "xVec")?;
    let xmat = section(text, "xMat")?;
    let ymat = section(text, "yMat")?;
    let dual = flat_numbers(&xvec)?.into_iter().map(|v| -v).collect();
    Ok(SdpaSolution {
        primal: parse_blocks(&ymat, blocks)?,
        dual,
        dual_slack: parse_blocks(&xmat, blocks)?,
    })
}

fn tokens(l: &str) -> Vec<String> {
    l.split(|c: char| c.is_whitespace() || matches!(c, ',' | '{' | '}' | '(' | ')'))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn parse_tok<T: std::str::FromStr>(tok: Option<&String>, line: usize) -> Result<T, SdpError> {
    let tok = tok.ok_or(SdpError::Parse {
        line,
        msg: "missing field".into(),
    })?;
    tok.parse().map_err(|_| SdpError::Parse {
        line,
        msg: format!("cannot parse `{tok}`"),
    })
}

/// Text of the balanced-brace group following `name =`.
fn section(text: &str, name: &str) -> Result<String, SdpError> {
    let missing = || SdpError::Parse {
        line: 0,
        msg: format!("section `{name}` not found"),
    };
    let start = text
        .match_indices(name)
        .find(|(i, _)| text[i + name.len()..].trim_start().starts_with('='))
        .map(|(i, _)| i)
        .ok_or_else(missing)?;
    let rest = &text[start..];
    let open = rest.find('{').ok_or_else(missing)?;
    let mut depth = 0usize;
    for (i, c) in rest[open..].char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Ok(rest[open..open + i + 1].to_string());
                }
            }
            _ => {}
        }
    }
    Err(missing())
}

fn flat_numbers(s: &str) -> Result<Vec<f64>, SdpError> {
    tokens(s)
        .iter()
        .map(|t| {
            t.parse().map_err(|_| SdpError::Parse {
                line: 0,
                msg: format!("cannot parse `{t}`"),
            })
        })
        .collect()
}

/// Splits the outermost group into its depth-1 children.
fn children(s: &str) -> Vec<&str> {
    let inner = s.trim();
    let inner = &inner[1..inner.len() - 1];
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut start = None;
    for (i, c) in inner.char_indices() {
        match c {
            '{' => {
                if depth == 0 {
                    start = Some(i);
                }
                depth += 1;
            }
            '}' => {
                depth = depth.saturating_sub(1);
                if depth == 0 {
                    if let Some(st) = start.take() {
                        out.push(&inner[st..=i]);
                    }
                }
            }
            _ => {}
        }
    }
    out
}

fn parse_blocks(s: &str, blocks: &[BlockKind]) -> Result<Vec<BlockValue>, SdpError> {
    let groups = children(s);
    if groups.len() != blocks.len() {
        return Err(SdpError::Parse {
            line: 0,
            msg: format!("expected {} blocks, found {}", blocks.len(), groups.len()),
        });
    }
    groups
        .iter()
        .zip(blocks)
        .map(|(g, kind)| {
            let nums = flat_numbers(g)?;
            match *kind {
                BlockKind::Psd(n) if nums.len() == n * n => {
                    Ok(BlockValue::Psd(DMatrix::from_row_slice(n, n, &nums)))
                }
                BlockKind::Lp(n) if nums.len() == n => Ok(BlockValue::Lp(DVector::from_vec(nums))),
                _ => Err(SdpError::Parse {
                    line: 0,
                    msg: format!("block of {} numbers does not match {:?}", nums.len(), kind),
                }),
            }
        })
        .collect()
}
