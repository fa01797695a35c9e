//! Line-oriented graph description.
//!
//! ```text
//! net <W> <H> <C_in>
//! classes <C>                       # optional, default 80
//! conv <K>x<K>/<s> <filters> [linear]
//! max <K>x<K>/<s>
//! route <i> [<j> ...] [split <0|1>]
//! upsample
//! head <scale_index>
//! ```
//!
//! Route references are absolute layer indices and must point backwards.

use std::str::SplitWhitespace;

use super::layer::{LayerKind, LayerSpec};
use super::{NetError, NetGraph, DEFAULT_CLASSES};
use crate::nn::Activation;
use crate::tensor::Scalar;

pub fn parse_config(text: &str) -> Result<NetGraph, NetError> {
    let mut header = None;
    let mut classes = None;
    let mut layers: Vec<LayerSpec> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tok = content.split_whitespace();
        let keyword = tok.next().expect("non-empty line has a token");
        let err = |msg: String| NetError::Parse { line, msg };

        if header.is_none() {
            if keyword != "net" {
                return Err(err(format!("expected `net <W> <H> <C>` header, found `{keyword}`")));
            }
            let w = parse_usize(&mut tok, "input width").map_err(err)?;
            let h = parse_usize(&mut tok, "input height").map_err(err)?;
            let c = parse_usize(&mut tok, "input channels").map_err(err)?;
            if w == 0 || h == 0 || c == 0 {
                return Err(err("input dimensions must be positive".into()));
            }
            expect_end(&mut tok).map_err(err)?;
            header = Some((w, h, c));
            continue;
        }

        let index = layers.len();
        let kind = match keyword {
            "classes" => {
                if !layers.is_empty() || classes.is_some() {
                    return Err(err("`classes` must appear once, before any layer".into()));
                }
                let c = parse_usize(&mut tok, "class count").map_err(err)?;
                if c == 0 {
                    return Err(err("class count must be positive".into()));
                }
                expect_end(&mut tok).map_err(err)?;
                classes = Some(c);
                continue;
            }
            "conv" => {
                let (kernel, stride) = parse_window(&mut tok).map_err(err)?;
                let filters = parse_usize(&mut tok, "filter count").map_err(err)?;
                if filters == 0 {
                    return Err(err("filter count must be positive".into()));
                }
                let mut batch_norm = true;
                let mut activation = Activation::default();
                for t in tok.by_ref() {
                    match t {
                        "linear" => {
                            batch_norm = false;
                            activation = Activation::Linear;
                        }
                        "nobn" => batch_norm = false,
                        _ => {
                            let act = t
                                .strip_prefix("act=")
                                .ok_or_else(|| err(format!("unexpected token `{t}`")))?;
                            activation = act.parse().map_err(err)?;
                        }
                    }
                }
                LayerKind::Conv {
                    kernel,
                    stride,
                    filters,
                    batch_norm,
                    activation,
                }
            }
            "max" => {
                let (kernel, stride) = parse_window(&mut tok).map_err(err)?;
                expect_end(&mut tok).map_err(err)?;
                LayerKind::Max { kernel, stride }
            }
            "route" => {
                let mut refs = Vec::new();
                let mut split = None;
                while let Some(t) = tok.next() {
                    if t == "split" {
                        let h = parse_usize(&mut tok, "split half").map_err(err)?;
                        split = Some(h);
                        expect_end(&mut tok).map_err(err)?;
                        break;
                    }
                    let r: usize = t
                        .parse()
                        .map_err(|_| err(format!("bad route reference `{t}` (absolute indices only)")))?;
                    if r >= index {
                        return Err(NetError::ForwardRef {
                            line,
                            layer: index,
                            target: r,
                        });
                    }
                    refs.push(r);
                }
                if refs.is_empty() {
                    return Err(err("route needs at least one reference".into()));
                }
                LayerKind::Route { refs, split }
            }
            "upsample" => {
                expect_end(&mut tok).map_err(err)?;
                LayerKind::Upsample
            }
            "head" => {
                let scale_index = parse_usize(&mut tok, "scale index").map_err(err)?;
                expect_end(&mut tok).map_err(err)?;
                LayerKind::Head { scale_index }
            }
            other => {
                return Err(NetError::UnknownLayer {
                    line,
                    layer: index,
                    kind: other.to_string(),
                })
            }
        };
        layers.push(LayerSpec { index, kind, line });
    }

    let (w, h, c) = header.ok_or(NetError::Parse {
        line: 0,
        msg: "missing `net` header".into(),
    })?;
    NetGraph::from_layers((w, h, c), classes.unwrap_or(DEFAULT_CLASSES), layers)
}

fn parse_usize(tok: &mut SplitWhitespace<'_>, what: &str) -> Result<usize, String> {
    let t = tok.next().ok_or_else(|| format!("missing {what}"))?;
    t.parse().map_err(|_| format!("bad {what} `{t}`"))
}

fn expect_end(tok: &mut SplitWhitespace<'_>) -> Result<(), String> {
    match tok.next() {
        None => Ok(()),
        Some(t) => Err(format!("unexpected token `{t}`")),
    }
}

/// Parses `<K>x<K>/<s>`.
fn parse_window(tok: &mut SplitWhitespace<'_>) -> Result<(usize, usize), String> {
    let t = tok.next().ok_or("missing window `<K>x<K>/<s>`")?;
    let bad = || format!("bad window `{t}`, expected `<K>x<K>/<s>`");
    let (size, stride) = t.split_once('/').ok_or_else(bad)?;
    let (kh, kw) = size.split_once('x').ok_or_else(bad)?;
    let kh: usize = kh.parse().map_err(|_| bad())?;
    let kw: usize = kw.parse().map_err(|_| bad())?;
    if kh != kw {
        return Err(format!("non-square window `{t}`"));
    }
    let stride: usize = stride.parse().map_err(|_| bad())?;
    Ok((kh, stride))
}

/// Canonical text of a graph: header, class count, then one layer per line.
pub fn canonical_text<T: Scalar>(g: &NetGraph<T>) -> String {
    let (w, h, c) = g.input_dims();
    let mut out = format!("net {w} {h} {c}\nclasses {}\n", g.num_classes());
    for l in g.layers() {
        out.push_str(&l.kind.to_string());
        out.push('\n');
    }
    out
}
