use super::{Configuration, PanelState, Slot, SlotState, COLOR_LEVELS, SHAPE_TYPES, SIZE_LEVELS};

/// Entity radius per size level, as a fraction of half the cell side.
pub const SHAPE_SCALES: [f64; SIZE_LEVELS] = [0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

const BACKGROUND: u8 = 255;
const OUTLINE: u8 = 0;
const OUTLINE_WIDTH: f64 = 1.0;

enum Outline {
    Circle { r: f64 },
    Polygon { vertices: Vec<(f64, f64)> },
}

impl Outline {
    fn new(shape: u8, r: f64) -> Self {
        let sides = match SHAPE_TYPES.get(shape as usize).copied().unwrap_or("circle") {
            "triangle" => 3,
            "square" => 4,
            "pentagon" => 5,
            "hexagon" => 6,
            _ => return Outline::Circle { r },
        };
        // odd polygons point up, even ones sit on a flat edge
        let offset = -std::f64::consts::FRAC_PI_2
            + if sides % 2 == 0 {
                std::f64::consts::PI / sides as f64
            } else {
                0.0
            };
        let vertices = (0..sides)
            .map(|k| {
                let a = offset + 2.0 * std::f64::consts::PI * k as f64 / sides as f64;
                (r * a.cos(), r * a.sin())
            })
            .collect();
        Outline::Polygon { vertices }
    }

    /// Distance inside the boundary, negative outside.
    fn depth(&self, x: f64, y: f64) -> f64 {
        match self {
            Outline::Circle { r } => r - (x * x + y * y).sqrt(),
            Outline::Polygon { vertices } => {
                let n = vertices.len();
                (0..n)
                    .map(|i| {
                        let (ax, ay) = vertices[i];
                        let (bx, by) = vertices[(i + 1) % n];
                        let (ex, ey) = (bx - ax, by - ay);
                        let len = (ex * ex + ey * ey).sqrt();
                        (ex * (y - ay) - ey * (x - ax)) / len
                    })
                    .fold(f64::INFINITY, f64::min)
            }
        }
    }
}

fn cell_boxes(slot: &Slot, size: usize) -> Vec<(f64, f64, f64)> {
    let s = size as f64;
    let (x0, y0, x1, y1) = (slot.bbox.0 * s, slot.bbox.1 * s, slot.bbox.2 * s, slot.bbox.3 * s);
    let (cw, ch) = ((x1 - x0) / slot.grid as f64, (y1 - y0) / slot.grid as f64);
    (0..slot.cells())
        .map(|k| {
            let (r, c) = ((k / slot.grid) as f64, (k % slot.grid) as f64);
            (x0 + (c + 0.5) * cw, y0 + (r + 0.5) * ch, cw.min(ch) / 2.0)
        })
        .collect()
}

fn draw(buf: &mut [u8], size: usize, cx: f64, cy: f64, half: f64, state: &SlotState, max_scale: f64) {
    let level = (state.size as usize).min(SIZE_LEVELS - 1);
    let r = half * SHAPE_SCALES[level] * max_scale;
    let outline = Outline::new(state.shape, r);
    let fill = COLOR_LEVELS[(state.color as usize).min(COLOR_LEVELS.len() - 1)];
    let lo = |c: f64| ((c - r - 1.0).floor().max(0.0)) as usize;
    let hi = |c: f64| ((c + r + 1.0).ceil() as usize).min(size);
    for y in lo(cy)..hi(cy) {
        for x in lo(cx)..hi(cx) {
            let d = outline.depth(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if d >= 0.0 {
                buf[y * size + x] = if d < OUTLINE_WIDTH { OUTLINE } else { fill };
            }
        }
    }
}

/// Rasterizes one panel as `size * size` grayscale bytes, row-major, white
/// background. Slots are drawn in configuration order, so inner slots
/// cover outer ones. Rendering is exact and deterministic: a pixel belongs
/// to a shape when its center lies inside it.
pub fn render_panel(state: &PanelState, config: Configuration, size: usize) -> Vec<u8> {
    let mut buf = vec![BACKGROUND; size * size];
    for (slot, s) in config.slots().iter().zip(state) {
        for (k, &(cx, cy, half)) in cell_boxes(slot, size).iter().enumerate() {
            if s.positions & (1 << k) != 0 {
                draw(&mut buf, size, cx, cy, half, s, slot.max_scale);
            }
        }
    }
    buf
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(shape: u8, size: u8, color: u8) -> PanelState {
        vec![SlotState {
            positions: 1,
            shape,
            size,
            color,
        }]
    }

    fn dark(buf: &[u8]) -> usize {
        buf.iter().filter(|&&p| p < BACKGROUND).count()
    }

    fn ink_bbox(buf: &[u8], size: usize) -> (usize, usize, usize, usize) {
        let mut b = (usize::MAX, usize::MAX, 0, 0);
        for (i, &p) in buf.iter().enumerate() {
            if p < BACKGROUND {
                let (x, y) = (i % size, i / size);
                b = (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y));
            }
        }
        b
    }

    #[test]
    fn circle_covers_its_area() {
        let circle = SHAPE_TYPES.iter().position(|&s| s == "circle").unwrap() as u8;
        for level in 0..SIZE_LEVELS as u8 {
            let buf = render_panel(&single(circle, level, 0), Configuration::Center, 32);
            let r = 16.0 * SHAPE_SCALES[level as usize];
            let area = std::f64::consts::PI * r * r;
            let got = dark(&buf) as f64;
            assert!((got - area).abs() <= 0.15 * area, "level {level}: {got} vs {area}");
        }
    }

    #[test]
    fn size_levels_nest() {
        for shape in 0..SHAPE_TYPES.len() as u8 {
            let small = ink_bbox(&render_panel(&single(shape, 0, 3), Configuration::Center, 32), 32);
            let large = ink_bbox(&render_panel(&single(shape, 5, 3), Configuration::Center, 32), 32);
            assert!(large.0 < small.0 && large.1 < small.1 && large.2 > small.2 && large.3 > small.3);
        }
    }

    #[test]
    fn rendering_is_deterministic_and_shapes_differ() {
        let panels: Vec<Vec<u8>> = (0..SHAPE_TYPES.len() as u8)
            .map(|t| render_panel(&single(t, 4, 2), Configuration::Center, 32))
            .collect();
        for (i, a) in panels.iter().enumerate() {
            assert_eq!(a, &render_panel(&single(i as u8, 4, 2), Configuration::Center, 32));
            for b in &panels[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn fill_and_outline_levels() {
        let buf = render_panel(&single(1, 5, 0), Configuration::Center, 32);
        assert_eq!(buf[16 * 32 + 16], COLOR_LEVELS[0]);
        assert!(buf.contains(&OUTLINE));
        assert_eq!(buf[0], BACKGROUND);
    }

    #[test]
    fn grid_cells_follow_the_mask() {
        let state = vec![SlotState {
            positions: 0b1001,
            shape: 4,
            size: 3,
            color: 7,
        }];
        let buf = render_panel(&state, Configuration::Grid2x2, 32);
        let quadrant_ink = |qx: usize, qy: usize| {
            (0..16)
                .flat_map(|y| (0..16).map(move |x| (x + 16 * qx, y + 16 * qy)))
                .any(|(x, y)| buf[y * 32 + x] < 255)
        };
        assert!(quadrant_ink(0, 0) && quadrant_ink(1, 1));
        assert!(!quadrant_ink(1, 0) && !quadrant_ink(0, 1));
    }
}
