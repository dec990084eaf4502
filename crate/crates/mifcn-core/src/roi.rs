//! Rectangular regions of interest and the sidecar file that names them.
//!
//! Evaluation wants one background rectangle (speckle only) and one or more
//! foreground rectangles (tissue features). The file format is line based:
//!
//! ```text
//! # role(name) top left height width
//! background(b1) 10 20 30 40
//! foreground(f1) 60 20 25 25
//! ```
//!
//! Coordinates are zero-based pixel offsets from the top-left corner.

use std::path::Path;

use crate::error::{Error, Result};

/// Axis-aligned pixel rectangle with nonzero area.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Result<Rect> {
        if height == 0 || width == 0 {
            return Err(Error::Domain(format!(
                "rectangle at ({top},{left}) has zero area ({height}x{width})"
            )));
        }
        Ok(Rect { top, left, height, width })
    }

    /// One past the last row.
    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    /// One past the last column.
    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn fits_within(&self, height: usize, width: usize) -> bool {
        self.bottom() <= height && self.right() <= width
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.top < other.bottom()
            && other.top < self.bottom()
            && self.left < other.right()
            && other.left < self.right()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedRoi {
    pub name: String,
    pub rect: Rect,
}

/// One background region plus at least one foreground region.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiSpec {
    pub background: NamedRoi,
    pub foregrounds: Vec<NamedRoi>,
}

impl RoiSpec {
    pub fn parse(text: &str) -> Result<RoiSpec> {
        let mut background = None;
        let mut foregrounds = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(Error::Format(format!(
                    "ROI line {}: expected `role(name) top left height width`, got {:?}",
                    lineno + 1,
                    raw.trim()
                )));
            }
            let (role, name) = parse_role(fields[0], lineno + 1)?;
            let nums = fields[1..]
                .iter()
                .map(|f| {
                    f.parse::<usize>().map_err(|_| {
                        Error::Format(format!("ROI line {}: `{f}` is not a coordinate", lineno + 1))
                    })
                })
                .collect::<Result<Vec<usize>>>()?;
            let rect = Rect::new(nums[0], nums[1], nums[2], nums[3])?;
            let roi = NamedRoi { name, rect };
            match role {
                Role::Background => {
                    if background.replace(roi).is_some() {
                        return Err(Error::Format(format!(
                            "ROI line {}: more than one background region",
                            lineno + 1
                        )));
                    }
                }
                Role::Foreground => foregrounds.push(roi),
            }
        }
        let background = background
            .ok_or_else(|| Error::Format("ROI file declares no background region".into()))?;
        if foregrounds.is_empty() {
            return Err(Error::Format("ROI file declares no foreground regions".into()));
        }
        let spec = RoiSpec { background, foregrounds };
        spec.check_disjoint()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<RoiSpec> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RoiSpec::parse(&text).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// The background must not overlap any foreground; foregrounds may
    /// overlap each other.
    fn check_disjoint(&self) -> Result<()> {
        for fg in &self.foregrounds {
            if self.background.rect.intersects(&fg.rect) {
                return Err(Error::Format(format!(
                    "background region `{}` overlaps foreground `{}`",
                    self.background.name, fg.name
                )));
            }
        }
        Ok(())
    }

    /// Bounds check against a concrete image size.
    pub fn validate_for(&self, height: usize, width: usize) -> Result<()> {
        for roi in std::iter::once(&self.background).chain(&self.foregrounds) {
            if !roi.rect.fits_within(height, width) {
                return Err(Error::Data(format!(
                    "ROI `{}` extends past the {height}x{width} image",
                    roi.name
                )));
            }
        }
        Ok(())
    }

    pub fn foreground_rects(&self) -> Vec<Rect> {
        self.foregrounds.iter().map(|r| r.rect).collect()
    }
}

enum Role {
    Background,
    Foreground,
}

fn parse_role(token: &str, lineno: usize) -> Result<(Role, String)> {
    let open = token.find('(');
    let (role_str, name) = match open {
        Some(i) if token.ends_with(')') => (&token[..i], token[i + 1..token.len() - 1].to_string()),
        _ => {
            return Err(Error::Format(format!(
                "ROI line {lineno}: role must look like `background(name)`, got `{token}`"
            )))
        }
    };
    match role_str {
        "background" => Ok((Role::Background, name)),
        "foreground" => Ok((Role::Foreground, name)),
        other => Err(Error::Format(format!(
            "ROI line {lineno}: unknown role `{other}` (expected background or foreground)"
        ))),
    }
}
