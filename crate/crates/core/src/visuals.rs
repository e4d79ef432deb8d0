//! Diagnostic images: where the vertices were picked, how strongly each
//! class's vertices respond across the image, the predicted parsing, and the
//! learned adjacency.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::Rgb;

use crate::dataset::{save_labels, save_rgb, tensor_to_rgb};
use crate::error::{config_err, Error, Result};
use crate::graph_reprojection::class_responses;
use crate::model::Model;
use crate::ops::argmax_channels;
use crate::synthetic::CLASS_NAMES;
use crate::tensor::{LabelMap, Tensor};

/// One color per class, background first.
pub const PALETTE: [[u8; 3]; 11] = [
    [0, 0, 0],
    [224, 172, 138],
    [120, 60, 20],
    [160, 90, 40],
    [40, 110, 220],
    [60, 170, 240],
    [230, 120, 160],
    [200, 30, 50],
    [90, 10, 30],
    [240, 70, 90],
    [70, 50, 40],
];

const MARK: Rgb<u8> = Rgb([255, 230, 0]);

#[derive(Clone, Debug)]
pub struct Visuals {
    /// Image pixel `(y, x)` of every vertex, with multiplicity.
    pub vertex_pixels: Vec<(usize, usize)>,
    /// Per class, the sum of its vertices' projection weights at each
    /// feature-grid pixel (values in `[0, K]`).
    pub responses: Vec<Vec<f64>>,
    pub response_size: (usize, usize),
    pub adjacency: Vec<Vec<f64>>,
    pub parsing: LabelMap,
    pub files: Vec<PathBuf>,
}

/// Write an 8-bit indexed PNG using [`PALETTE`].
pub fn save_paletted(labels: &LabelMap, path: &Path) -> Result<()> {
    if let Some(bad) = labels.data.iter().find(|&&v| v as usize >= PALETTE.len()) {
        return Err(Error::Validation(format!("label {bad} has no palette entry")));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), labels.w as u32, labels.h as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(PALETTE.concat());
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(&labels.data).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

fn save_gray(values: &[f64], h: usize, w: usize, path: &Path) -> Result<()> {
    let max = values.iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let bytes: Vec<u8> = values.iter().map(|v| (v * scale).round().clamp(0.0, 255.0) as u8).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches dimensions");
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Compute the diagnostics for one `1 x 3 x H x W` image and write them to `out_dir`.
pub fn dump_visuals(model: &Model, image: &Tensor, out_dir: &Path) -> Result<Visuals> {
    if image.n != 1 {
        return Err(config_err!("dump_visuals takes one image, got {}", image.n));
    }
    let fwd = model.infer(image)?;
    let states = fwd
        .graph
        .as_ref()
        .ok_or_else(|| config_err!("the model was built without the graph branch"))?;
    let state = &states[0];
    let cfg = &model.config;
    let (fh, fw) = (fwd.fused.x0.h, fwd.fused.x0.w);
    let stride = image.h / fh;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();

    let vertex_pixels: Vec<(usize, usize)> = state
        .vertices
        .indices
        .iter()
        .map(|&i| ((i / fw) * stride + stride / 2, (i % fw) * stride + stride / 2))
        .collect();
    let mut overlay = tensor_to_rgb(image);
    for &(y, x) in &vertex_pixels {
        overlay.put_pixel(x as u32, y as u32, MARK);
    }
    let path = out_dir.join("vertices.png");
    save_rgb(&overlay, &path)?;
    files.push(path);

    let responses = class_responses(&state.projection, cfg.k, cfg.classes);
    for (cls, r) in responses.iter().enumerate() {
        let name = CLASS_NAMES.get(cls).copied().unwrap_or("class");
        let path = out_dir.join(format!("response_{cls:02}_{name}.png"));
        save_gray(r, fh, fw, &path)?;
        files.push(path);
    }

    let parsing = argmax_channels(&fwd.final_.full_logits).remove(0);
    let path = out_dir.join("parsing.png");
    save_paletted(&parsing, &path)?;
    files.push(path);

    let v = cfg.vertices();
    let a = &model.params.graph.adjacency.data;
    let adjacency: Vec<Vec<f64>> = a.chunks(v).map(<[f64]>::to_vec).collect();
    let mut text = String::new();
    for row in &adjacency {
        let cells: Vec<String> = row.iter().map(|x| format!("{x:.6e}")).collect();
        text.push_str(&cells.join(" "));
        text.push('\n');
    }
    let path = out_dir.join("adjacency.txt");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    files.push(path);

    Ok(Visuals {
        vertex_pixels,
        responses,
        response_size: (fh, fw),
        adjacency,
        parsing,
        files,
    })
}

/// Write the parsing of one image as a paletted PNG plus raw class ids.
pub fn write_parsing(model: &Model, image: &Tensor, out_dir: &Path) -> Result<LabelMap> {
    let fwd = model.infer(image)?;
    let parsing = argmax_channels(&fwd.final_.full_logits).remove(0);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    save_paletted(&parsing, &out_dir.join("parsing.png"))?;
    save_labels(&parsing, &out_dir.join("labels.png"))?;
    Ok(parsing)
}
