from vecap.shardio import ImageTextRecord


def rec(i, alt=None, **kw):
    return ImageTextRecord(
        record_id=f"r{i:04d}", image_ref=f"img/{i}.jpg", alt_texts=alt or (f"alt text {i}",), **kw
    )
