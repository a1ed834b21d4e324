//! Rule-based check that captions describe exactly the masked changes.
//! Works from the mask and images alone, never from the generator's
//! scene description.

use mvcc_core::data::Instance;
use mvcc_core::raster::{BinaryMask, Raster};

const NO_CHANGE: [&str; 4] =
    ["the scene is the same", "there is no change", "nothing has changed", "no change has occurred in the scene"];
const PLACES: [[&str; 3]; 3] =
    [["top left", "top", "top right"], ["left", "center", "right"], ["bottom left", "bottom", "bottom right"]];

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Event {
    pub kind: &'static str,
    pub appears: bool,
    /// Grid location for buildings, orientation for roads.
    pub place: String,
}

/// Bounding boxes of 4-connected components: (top, left, bottom, right).
pub fn components(mask: &BinaryMask) -> Vec<(usize, usize, usize, usize)> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut boxes = Vec::new();
    for start in 0..h * w {
        if seen[start] || mask.data[start] == 0 {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut bb = (h, w, 0, 0);
        while let Some(p) = stack.pop() {
            let (r, c) = (p / w, p % w);
            bb = (bb.0.min(r), bb.1.min(c), bb.2.max(r), bb.3.max(c));
            let mut next = Vec::new();
            if r > 0 {
                next.push(p - w);
            }
            if r + 1 < h {
                next.push(p + w);
            }
            if c > 0 {
                next.push(p - 1);
            }
            if c + 1 < w {
                next.push(p + 1);
            }
            for q in next {
                if !seen[q] && mask.data[q] == 1 {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
        boxes.push(bb);
    }
    boxes
}

fn spread(img: &Raster, bb: (usize, usize, usize, usize)) -> f64 {
    let mut lo = [f64::MAX; 3];
    let mut hi = [f64::MIN; 3];
    for r in bb.0..=bb.2 {
        for c in bb.1..=bb.3 {
            let p = img.pixel(r, c);
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
    }
    (0..3).map(|k| hi[k] - lo[k]).sum()
}

/// What the mask and images show: one event per changed component. The
/// frame in which the footprint is a flat colour holds the object.
pub fn observed(inst: &Instance) -> Option<Vec<Event>> {
    let mask = inst.pair.mask.as_ref()?;
    let n = mask.height;
    let mut events: Vec<Event> = components(mask)
        .into_iter()
        .map(|bb| {
            let full_w = bb.1 == 0 && bb.3 == mask.width - 1;
            let full_h = bb.0 == 0 && bb.2 == n - 1;
            let appears = spread(&inst.pair.image_b, bb) < spread(&inst.pair.image_a, bb);
            if full_w || full_h {
                let place = if full_w { "horizontal" } else { "vertical" };
                Event { kind: "road", appears, place: place.into() }
            } else {
                let cy = (bb.0 + bb.2 + 1) as f64 / 2.0;
                let cx = (bb.1 + bb.3 + 1) as f64 / 2.0;
                let band = |v: f64| ((v * 3.0 / n as f64) as usize).min(2);
                Event { kind: "building", appears, place: PLACES[band(cy)][band(cx)].into() }
            }
        })
        .collect();
    events.sort();
    Some(events)
}

/// Events a caption claims, or an error naming the unparseable clause.
pub fn claimed(caption: &str) -> Result<Vec<Event>, String> {
    if NO_CHANGE.contains(&caption) {
        return Ok(Vec::new());
    }
    let mut events = Vec::new();
    for clause in caption.split(" and ") {
        let words: Vec<&str> = clause.split(' ').collect();
        let has = |w: &str| words.contains(&w);
        let kind = if has("building") {
            "building"
        } else if has("road") {
            "road"
        } else {
            return Err(format!("no object in {clause:?}"));
        };
        let gone = has("removed") || has("disappears") || has("demolished");
        let new = has("appears") || has("built") || has("constructed") || has("new");
        if gone == new {
            return Err(format!("no single event in {clause:?}"));
        }
        let place = if kind == "road" {
            match (has("horizontal"), has("vertical")) {
                (true, false) => "horizontal".to_string(),
                (false, true) => "vertical".to_string(),
                _ => return Err(format!("no orientation in {clause:?}")),
            }
        } else {
            let tail = clause.rsplit_once(" the ").map(|(_, t)| t).unwrap_or("");
            if !PLACES.iter().flatten().any(|p| *p == tail) {
                return Err(format!("no location in {clause:?}"));
            }
            tail.to_string()
        };
        events.push(Event { kind, appears: new, place });
    }
    events.sort();
    Ok(events)
}

/// Ok if every caption of `inst` names exactly the observed events.
pub fn consistent(inst: &Instance) -> Result<(), String> {
    let seen = observed(inst).ok_or_else(|| format!("{}: no mask", inst.id))?;
    if !(1..=5).contains(&inst.pair.captions.len()) {
        return Err(format!("{}: {} captions", inst.id, inst.pair.captions.len()));
    }
    for c in &inst.pair.captions {
        let said = claimed(c).map_err(|e| format!("{}: {e}", inst.id))?;
        if said != seen {
            return Err(format!("{}: caption {c:?} claims {said:?}, mask shows {seen:?}", inst.id));
        }
    }
    Ok(())
}
