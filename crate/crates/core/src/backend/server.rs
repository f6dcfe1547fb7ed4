use std::io::{self, Read, Write};

use super::protocol::{read_frame, write_frame, Request, Response};
use super::Backend;

/// Answer framed requests with `backend` until the reader reaches end of
/// stream. Undecodable requests and backend failures become `error` replies;
/// only transport errors end the loop early. Returns the number of requests
/// answered.
pub fn serve<R: Read, W: Write>(
    mut reader: R,
    mut writer: W,
    backend: &mut dyn Backend,
) -> io::Result<usize> {
    let mut answered = 0;
    while let Some(frame) = read_frame(&mut reader)? {
        let response = match serde_json::from_slice::<Request>(&frame) {
            Err(e) => Response::Error(format!("malformed request: {e}")),
            Ok(req) => dispatch(backend, req),
        };
        write_frame(&mut writer, &response.to_json())?;
        answered += 1;
    }
    Ok(answered)
}

fn dispatch(backend: &mut dyn Backend, req: Request) -> Response {
    let result = match req {
        Request::Handshake {} => backend.info().map(Response::Handshake),
        Request::TextEmbed { texts } => backend.text_embed(&texts).map(Response::TextEmbed),
        Request::ImageEmbedRoi {
            image,
            boxes,
            context_pad,
        } => backend
            .image_embed_roi(&image, &boxes, context_pad)
            .map(Response::ImageEmbedRoi),
        Request::SegmentBoxes { image, boxes } => backend
            .segment_boxes(&image, &boxes)
            .map(Response::SegmentBoxes),
    };
    result.unwrap_or_else(|e| Response::Error(e.to_string()))
}
